"""
Gradient checks of every objective term on a tiny float64 model.
"""
import logging
from typing import Callable, Dict, Optional

import numpy as np

from natlab.models.config import LossConfig, ModelConfig
from natlab.models.corpus import NON_EMITTABLE_IDS
from natlab.models.metrics import GradCheckReport
from natlab.models.views import DualViewBatch
from natlab.services import autodiff as ad
from natlab.services import losses, transformer
from natlab.services.masking import make_view, pair_views
from natlab.services.params import ParamStore

logger = logging.getLogger(__name__)

CHECKED_TERMS = losses.TERM_NAMES + ("total",)

TINY_MODEL = ModelConfig(
    d_model=8, d_inner=16, n_layers_enc=2, n_layers_dec=2, n_heads=2,
    vocab_size=14, n_max=8, dropout_online=0.1, dropout_average=0.1,
)


def tiny_batch(config: ModelConfig, seed: int = 0) -> DualViewBatch:
    """Three sentences with overlapping masks; the last one shares no position."""
    rng = np.random.default_rng(seed)
    emittable = np.setdiff1d(np.arange(config.vocab_size), NON_EMITTABLE_IDS)
    lengths = (5, 4, 3)
    masks = (([0, 1, 2], [1, 2, 4]), ([0, 3], [0, 1, 3]), ([0], [2]))
    view1, view2, sources = [], [], []
    for length, (m1, m2) in zip(lengths, masks):
        target = rng.choice(emittable, size=length).tolist()
        sources.append([2] + rng.choice(emittable, size=int(rng.integers(2, 6))).tolist())
        view1.append(make_view(target, m1))
        view2.append(make_view(target, m2))
    return pair_views(view1, view2, sources)


def _perturbed_average(online: ParamStore, seed: int) -> ParamStore:
    rng = np.random.default_rng(seed + 1)
    average = online.copy(requires_grad=False)
    for _, node in average.items():
        node.value += 0.05 * rng.standard_normal(node.shape)
    return average


def term_function(
    name: str,
    online: ParamStore,
    average: ParamStore,
    batch: DualViewBatch,
    loss_config: LossConfig,
    seed: int = 0,
) -> Callable[[], ad.TensorNode]:
    """Zero-argument loss function for `name`; dropout masks are replayed on every call."""
    config = online.config
    src = batch.source_array()
    in1, in2 = batch.input_arrays()

    def f() -> ad.TensorNode:
        rngs = [np.random.default_rng([seed, i]) for i in range(4)]
        on1 = transformer.forward(online, src, in1, config.dropout_online, rngs[0])
        on2 = transformer.forward(online, src, in2, config.dropout_online, rngs[1])
        av1 = transformer.forward(average, src, in1, config.dropout_average, rngs[2])
        av2 = transformer.forward(average, src, in2, config.dropout_average, rngs[3])
        terms = losses.compute_terms(on1, on2, av1, av2, batch, loss_config)
        if name == "total":
            return losses.objective(terms, loss_config)
        return getattr(terms, name)

    return f


def check_objective_gradients(
    model: Optional[ModelConfig] = None,
    loss_config: Optional[LossConfig] = None,
    max_coords: Optional[int] = 6,
    tolerance: float = 1e-5,
    seed: int = 0,
) -> Dict[str, GradCheckReport]:
    """
    Run grad_check for each objective term and the weighted total in float64.

    Returns:
        term name -> GradCheckReport
    """
    model = model or TINY_MODEL
    loss_config = loss_config or LossConfig(label_smoothing=0.1)
    reports: Dict[str, GradCheckReport] = {}
    with ad.precision("float64"):
        online = transformer.init_params(model, seed=seed, dtype="float64")
        average = _perturbed_average(online, seed)
        batch = tiny_batch(model, seed)
        params = dict(online.items())
        for name in CHECKED_TERMS:
            f = term_function(name, online, average, batch, loss_config, seed)
            reports[name] = ad.grad_check(f, params, tolerance=tolerance, max_coords=max_coords, seed=seed)
            logger.info("%s: max rel error %.2e over %d coordinates", name, reports[name].max_rel_error, reports[name].coordinates)
    return reports
