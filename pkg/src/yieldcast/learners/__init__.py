from ._tree import Tree, grow_tree, tree_predict
from .io import dumps_model, load_model, loads_model, model_from_dict, model_to_dict, save_model
from .models import (
    KINDS,
    FittedModel,
    LearnerSpec,
    fit_cart,
    fit_gbm,
    fit_lasso,
    fit_learner,
    fit_ols,
    fit_random_forest,
    lasso_objective,
    predict,
)

__all__ = [
    "KINDS",
    "FittedModel",
    "LearnerSpec",
    "Tree",
    "dumps_model",
    "fit_cart",
    "fit_gbm",
    "fit_lasso",
    "fit_learner",
    "fit_ols",
    "fit_random_forest",
    "grow_tree",
    "lasso_objective",
    "load_model",
    "loads_model",
    "model_from_dict",
    "model_to_dict",
    "predict",
    "save_model",
    "tree_predict",
]
