from network.generators import generate_er, generate_heterogeneous
from network.graph import (
    corrupt,
    density,
    edges,
    from_edges,
    group_strata,
    in_adjacency,
    in_degree,
    in_degrees,
    treated_in_degree,
    treated_in_degrees,
)
