"""Self-contained statistics used by the MESAS significance scan."""
from .cluster import agglomerative_two_clusters
from .special import betainc, f_sf, kolmogorov_sf, lgamma, student_t_sf2
from .twosample import (
    SplitLists,
    TestResult,
    ks_test,
    levene_test,
    lower_median,
    median_split,
    t_test,
    three_sigma_outliers,
)

__all__ = [
    "SplitLists",
    "TestResult",
    "agglomerative_two_clusters",
    "betainc",
    "f_sf",
    "kolmogorov_sf",
    "ks_test",
    "levene_test",
    "lgamma",
    "lower_median",
    "median_split",
    "student_t_sf2",
    "t_test",
    "three_sigma_outliers",
]
