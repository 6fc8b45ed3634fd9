from simulation.harness import SimulationResult, load_networks, run_protocol, summarize, true_means_oracle
