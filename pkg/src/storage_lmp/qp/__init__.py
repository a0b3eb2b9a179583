from .problem import QpProblem, QpSolution, Status
from .ipm import solve
from .oracle import TooLarge, active_set_oracle

__all__ = ["QpProblem", "QpSolution", "Status", "solve", "active_set_oracle", "TooLarge"]
