import logging
import math
from enum import Enum
from typing import List, Optional

from rich.console import Console
from rich.panel import Panel
from rich.table import Table

from models.data_models import FitResult

logger = logging.getLogger(__name__)

# Log-likelihood may dip by this much per EM step before it counts as a decrease
ASCENT_SLACK = 1e-9
BOUND_MARGIN = 1e-4


class FitGrade(Enum):
    """Fit grade levels"""
    EXCELLENT = "EXCELLENT"
    GOOD = "GOOD"
    FAIR = "FAIR"
    POOR = "POOR"


class FitIssue:
    """A problem found in a fitted model"""
    def __init__(self, issue_type: str, severity: str, description: str, field: Optional[str] = None):
        self.issue_type = issue_type
        self.severity = severity  # HIGH, MEDIUM, LOW
        self.description = description
        self.field = field

    def to_dict(self) -> dict:
        return {
            "issue_type": self.issue_type,
            "severity": self.severity,
            "description": self.description,
            "field": self.field,
        }


class DiagnosticsResult:
    """Outcome of fit validation"""
    def __init__(self):
        self.grade: FitGrade = FitGrade.GOOD
        self.issues: List[FitIssue] = []
        self.passed_checks: int = 0
        self.total_checks: int = 0
        self.recommendations: List[str] = []
        self.is_acceptable: bool = True

    def to_dict(self) -> dict:
        return {
            "grade": self.grade.value,
            "is_acceptable": self.is_acceptable,
            "passed_checks": self.passed_checks,
            "total_checks": self.total_checks,
            "issues": [issue.to_dict() for issue in self.issues],
            "recommendations": self.recommendations,
        }


class FitDiagnostics:
    """Rule-based validation of an EM fit before its results are written"""

    def __init__(self, pq_bounds=None):
        self.pq_bounds = pq_bounds

    def validate(self, fit: FitResult) -> DiagnosticsResult:
        result = DiagnosticsResult()
        self._run_checks(fit, result)
        self._calculate_grade(result)
        return result

    def _check(self, result: DiagnosticsResult, passed: bool, issue: FitIssue):
        result.total_checks += 1
        if passed:
            result.passed_checks += 1
        else:
            result.issues.append(issue)

    def _run_checks(self, fit: FitResult, result: DiagnosticsResult):
        # Check 1: convergence
        self._check(
            result,
            fit.converged,
            FitIssue("NOT_CONVERGED", "HIGH", f"EM stopped after {fit.n_iters} iterations without converging", "converged"),
        )

        # Check 2: EM ascent
        trace = fit.loglik_trace
        drops = [
            i for i in range(1, len(trace))
            if trace[i] < trace[i - 1] - ASCENT_SLACK * max(1.0, abs(trace[i - 1]))
        ]
        self._check(
            result,
            not drops,
            FitIssue("LOGLIK_DECREASE", "HIGH", f"log-likelihood decreased at iterations {drops[:5]}", "loglik_trace"),
        )

        # Check 3: finite estimates
        finite = all(math.isfinite(v) for v in list(fit.mean_outcomes.values()) + list(fit.contrasts.values()))
        self._check(
            result,
            finite,
            FitIssue("NONFINITE_ESTIMATE", "HIGH", "mean outcomes or contrasts are not finite", "mean_outcomes"),
        )

        # Check 4: binomial separation
        separated = [flag.split(":", 1)[1] for flag in fit.flags if flag.startswith("binomial_separation")]
        self._check(
            result,
            not separated,
            FitIssue("SEPARATION", "MEDIUM", f"logit coefficients clamped in {', '.join(separated)}", "family"),
        )

        # Check 5: (p, q) optimizer
        self._check(
            result,
            "pq_not_converged" not in fit.flags,
            FitIssue("PQ_OPTIMIZER", "MEDIUM", "the (p, q) search hit its budget at least once", "mismeasure"),
        )

        # Check 6: (p, q) at a bound
        if self.pq_bounds is not None:
            lo, hi = self.pq_bounds
            pairs = [(fit.mismeasure.p, fit.mismeasure.q)]
            if fit.mismeasure.per_stratum:
                pairs = list(fit.mismeasure.per_stratum.values())
            at_upper = [v for pair in pairs for v in pair if v > hi - BOUND_MARGIN]
            self._check(
                result,
                not at_upper,
                FitIssue("PQ_AT_BOUND", "LOW", f"mismeasurement probability at the upper bound {hi}", "mismeasure"),
            )

        # Check 7: prior underdispersion
        underdispersed = [
            label for network in fit.priors for label, prior in network.items() if prior.underdispersed
        ]
        self._check(
            result,
            not underdispersed,
            FitIssue("UNDERDISPERSED_PRIOR", "LOW", "observed degrees underdispersed; prior rho clamped to 0", "priors"),
        )

        # Check 8: bootstrap failures
        if fit.bootstrap is not None:
            share = fit.bootstrap.n_failed / fit.bootstrap.n_reps
            self._check(
                result,
                share <= 0.05,
                FitIssue("BOOTSTRAP_FAILURES", "MEDIUM", f"{share:.0%} of bootstrap refits failed", "bootstrap"),
            )

    def _calculate_grade(self, result: DiagnosticsResult):
        score = result.passed_checks / result.total_checks if result.total_checks else 0.5
        high_issues = sum(1 for issue in result.issues if issue.severity == "HIGH")

        if score >= 0.9 and high_issues == 0:
            result.grade = FitGrade.EXCELLENT
        elif score >= 0.7 and high_issues == 0:
            result.grade = FitGrade.GOOD
        elif high_issues <= 1 and score >= 0.5:
            result.grade = FitGrade.FAIR
        else:
            result.grade = FitGrade.POOR

        if high_issues:
            result.is_acceptable = False
            result.recommendations.append("Rerun with more starts or a larger iteration budget")
        if any(issue.issue_type == "SEPARATION" for issue in result.issues):
            result.recommendations.append("Some conditions are (nearly) separated; interpret their slopes with care")
        if any(issue.issue_type == "PQ_AT_BOUND" for issue in result.issues):
            result.recommendations.append("Widen pq_bounds or check the network for gross measurement problems")
        if result.grade == FitGrade.POOR:
            result.is_acceptable = False

    def print_report(self, result: DiagnosticsResult, console: Optional[Console] = None, source: str = ""):
        """Print a formatted diagnostics report"""
        console = console or Console()
        grade_emoji = {
            FitGrade.EXCELLENT: "🌟",
            FitGrade.GOOD: "✅",
            FitGrade.FAIR: "⚠️",
            FitGrade.POOR: "❌",
        }
        emoji = grade_emoji.get(result.grade, "❓")

        table = Table(title=f"{emoji} Fit Diagnostics")
        table.add_column("Metric", style="cyan")
        table.add_column("Value", style="magenta")
        if source:
            table.add_row("Source", source)
        table.add_row("Grade", f"{emoji} {result.grade.value}")
        table.add_row("Checks Passed", f"{result.passed_checks}/{result.total_checks}")
        table.add_row("Acceptable", "✅ Yes" if result.is_acceptable else "❌ No")
        console.print(table)

        if result.issues:
            lines = []
            for issue in result.issues:
                severity_emoji = {"HIGH": "🚨", "MEDIUM": "⚠️", "LOW": "ℹ️"}.get(issue.severity, "•")
                lines.append(f"{severity_emoji} {issue.description}")
            console.print(Panel("\n".join(lines), title="🔍 Fit Issues", border_style="red"))

        if result.recommendations:
            rec_text = "\n".join(f"• {rec}" for rec in result.recommendations)
            console.print(Panel(rec_text, title="💡 Recommendations", border_style="blue"))
