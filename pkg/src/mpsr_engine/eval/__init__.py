from .metrics import IMPROPER_NEGATIVE_THR, ScoredBox, average_precision, improper_negative_count, voc_ap
from .report import EvalReport, evaluate, print_report

__all__ = [
    "IMPROPER_NEGATIVE_THR", "ScoredBox", "average_precision", "improper_negative_count", "voc_ap",
    "EvalReport", "evaluate", "print_report",
]
