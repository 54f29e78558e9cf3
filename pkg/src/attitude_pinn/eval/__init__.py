from .campaign import (CONTROLLERS, CampaignSummary, ControllerSpec, MetricReport, NoiseConfig,
                       RunResult, compare_settling, run_mc_campaign, run_single, settling_time,
                       summarize, write_trace)
from .metrics import (MRE_FLOOR, RegressorMetrics, mre, physics_error, regressor_metrics,
                      self_loop_predictions, self_loop_rollout, wdot_scale)
from .stats import enumerate_p, wilcoxon_signed_rank

__all__ = [
    "CONTROLLERS", "CampaignSummary", "ControllerSpec", "MRE_FLOOR", "MetricReport",
    "NoiseConfig", "RegressorMetrics", "RunResult", "compare_settling", "enumerate_p", "mre",
    "physics_error", "regressor_metrics", "run_mc_campaign", "run_single", "self_loop_predictions",
    "self_loop_rollout", "settling_time", "summarize", "wdot_scale", "wilcoxon_signed_rank",
    "write_trace",
]
