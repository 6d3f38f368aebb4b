from ._newton import ModelFit, NonConvergenceError, RankDeficientError
from .glm import (
    LogisticMLE,
    MultinomialLogitMLE,
    PropensityWeights,
    fit_logistic,
    fit_multinomial,
    ipw_weights,
    multinomial_probabilities,
)
from .survival import CoxFit, CoxPHModel, KaplanMeier, KmCurve, fit_cox, harrell_c, km_estimate, log_rank
from .univariate import (
    TestResult,
    anova_oneway,
    bonferroni,
    categorical_test,
    chi_square,
    continuous_test,
    fisher_exact,
    kruskal_wallis,
)

__all__ = [
    "ModelFit", "NonConvergenceError", "RankDeficientError",
    "LogisticMLE", "MultinomialLogitMLE", "PropensityWeights", "fit_logistic", "fit_multinomial",
    "ipw_weights", "multinomial_probabilities",
    "CoxFit", "CoxPHModel", "KaplanMeier", "KmCurve", "fit_cox", "harrell_c", "km_estimate", "log_rank",
    "TestResult", "anova_oneway", "bonferroni", "categorical_test", "chi_square", "continuous_test",
    "fisher_exact", "kruskal_wallis",
]
