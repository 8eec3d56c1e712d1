"""
End-to-end pipeline and the gradient-check harness.

`compute_pipeline` runs the stages in memory:

    scene -> lsconv -> heatmaps -> mask_pe -> encode -> decode -> render

each stage reading the state left by the previous ones. `run_pipeline` writes
every stage's outputs to an artifact directory and closes it with a manifest.
Every stage draws from its own spawned random stream, so changing the decoder
depth leaves all upstream files untouched.

To use:

    from hmpe.pipeline import run_pipeline
    from hmpe.utils.config import PipelineConfig

    run_pipeline(PipelineConfig(seed=3), "runs/seed3")
"""
from dataclasses import dataclass
from functools import partial
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from toolz import merge, pipe
from tqdm import tqdm

from hmpe import logger
from hmpe.heads import (
    BboxHead,
    BoxTarget,
    ClassHead,
    class_partials,
    class_score,
    reg_loss,
    reg_partials,
)
from hmpe.heatmaps import heatmap_pyramid, heatmap_triplet, normalize_heatmap
from hmpe.hidq import DecoderConfig, decoder_stack, init_queries, suppress_queries
from hmpe.lsconv import LSConvWeights, lsconv_channels
from hmpe.maskpe import mask_from_heatmap, masked_pe, sinusoidal_pe
from hmpe.mohfe import QkvProjections, embed_heatmap, encode, multiscale_fuse
from hmpe.synth import SCENE_STREAM, cells_in_box, random_target, synth
from hmpe.utils.artifacts import ArtifactStore
from hmpe.utils.config import PipelineConfig
from hmpe.utils.errors import DomainError, HmpeError, StageError, VerificationError
from hmpe.utils.numerics import ArrayLike, Rng, Tensor, as_tensor, check_rank, finite_diff_grad
from hmpe.utils.plotting import RasterImage, append_heatbar, overlay, render_heatmap
from hmpe.utils.tensor_io import PathLike

State = Dict[str, Any]

STREAMS = {"scene": SCENE_STREAM, "lsconv": 1, "heads": 2, "encoder": 3, "decoder": 4}
TOLERANCES = {1: 1e-4, 2: 1e-3, 3: 5e-2}
# elements with smaller analytic partials are skipped by the relative-error check
MIN_ANALYTIC = 1e-3
GRADCHECK_DIMS = (2, 3, 3)


def _stream(cfg: PipelineConfig, name: str) -> Rng:
    return Rng(cfg.seed).spawn(STREAMS[name])


def lsconv_weights(cfg: PipelineConfig) -> LSConvWeights:
    return LSConvWeights.default(_stream(cfg, "lsconv"), cfg.taps)


def calibrated_heads(cfg: PipelineConfig, activations: ArrayLike) -> Tuple[ClassHead, BboxHead]:
    """Seeded heads whose heatmaps peak where the activations do."""
    rng = _stream(cfg, "heads")
    return (
        ClassHead.calibrated(rng.spawn(0), activations),
        BboxHead.calibrated(rng.spawn(1), activations, cfg.box, cfg.huber_delta),
    )


def heat_projections(cfg: PipelineConfig) -> Tensor:
    """Heat-to-token projections (3, D, 1) for the class, bbox and mixed maps."""
    return _stream(cfg, "encoder").spawn(0).uniform((3, cfg.depth, 1), -1.0, 1.0)


def qkv_projections(cfg: PipelineConfig) -> QkvProjections:
    return QkvProjections.random(_stream(cfg, "encoder").spawn(1), cfg.depth)


def query_projection(cfg: PipelineConfig) -> Tensor:
    scale = 1.0 / np.sqrt(cfg.depth)
    return _stream(cfg, "decoder").spawn(0).uniform((cfg.depth, cfg.depth), -scale, scale)


def decoder_config(cfg: PipelineConfig) -> DecoderConfig:
    return DecoderConfig(
        layers=cfg.layers, heads=cfg.heads, points=cfg.points, depth=cfg.depth, reweight=cfg.reweight
    )


def decoder_rng(cfg: PipelineConfig) -> Rng:
    return _stream(cfg, "decoder").spawn(1)


def mask_heat(cfg: PipelineConfig, h: ArrayLike) -> Tensor:
    """The map the mask is thresholded on.

    With the default `scales=(1,)` this is `h` itself. Otherwise `h` is pooled to
    every scale that divides its grid, fused back and normalised; scales that do
    not divide the grid are skipped with a warning.
    """
    values = as_tensor(h, "mask heatmap")
    check_rank("mask heatmap", values, 2)
    height, width = values.shape
    usable = [s for s in cfg.scales if height % s == 0 and width % s == 0]
    skipped = sorted(set(cfg.scales) - set(usable))
    if skipped:
        logger.warning(f"scales {skipped} do not divide the {height}x{width} grid, skipped")
    if set(usable) <= {1}:
        return values
    return normalize_heatmap(multiscale_fuse(heatmap_pyramid(values, usable), (height, width)))


def stage_scene(state: State) -> State:
    cfg = state["config"]
    scene = synth(cfg.seed, (cfg.channels, cfg.height, cfg.width), cfg.box, cfg.scale)
    return merge(state, {"scene": scene})


def stage_lsconv(state: State) -> State:
    cfg = state["config"]
    processed, penalty = lsconv_channels(state["scene"].activations, lsconv_weights(cfg), cfg.fusion_w, cfg.unit_shift)
    logger.debug(f"lsconv continuity penalty {penalty:.6g}")
    return merge(state, {"lsconv_activations": processed, "lsconv_penalty": penalty})


def stage_heatmaps(state: State) -> State:
    cfg = state["config"]
    activations = state["lsconv_activations"]
    class_head, bbox_head = calibrated_heads(cfg, activations)
    triplet = heatmap_triplet(
        class_head, bbox_head, activations, cfg.box, cfg.lam, cfg.bbox_grad_order
    )
    return merge(state, {"class_head": class_head, "bbox_head": bbox_head, "triplet": triplet})


def stage_mask_pe(state: State) -> State:
    cfg = state["config"]
    fused = mask_heat(cfg, state["triplet"].select(cfg.mask_source))
    mask = mask_from_heatmap(fused, cfg.tau)
    logger.debug(f"{mask.hot_fraction:.1%} of cells are hot at tau={cfg.tau}")
    pe = masked_pe(sinusoidal_pe(cfg.height, cfg.width, cfg.depth), mask)
    return merge(state, {"mask_heat": fused, "mask": mask, "pe": pe})


def stage_encode(state: State) -> State:
    cfg = state["config"]
    triplet, pe = state["triplet"], state["pe"]
    proj = heat_projections(cfg)
    e_class = embed_heatmap(triplet.h_class, proj[0], pe, "class")
    e_bbox = embed_heatmap(triplet.h_bbox, proj[1], pe, "bbox")
    e_mixed = embed_heatmap(triplet.h_mixed, proj[2], pe, "mixed")
    encoded = encode(e_class, e_bbox, qkv_projections(cfg), cfg.heads)
    return merge(state, {"e_mixed": e_mixed, "encoded": encoded})


def stage_decode(state: State) -> State:
    cfg = state["config"]
    queries = suppress_queries(
        init_queries(state["e_mixed"], query_projection(cfg)), cfg.tau, cfg.top_m, cfg.reweight
    )
    encoded = state["encoded"]
    result = decoder_stack(decoder_config(cfg), queries, encoded.k_enc, encoded.v_enc, decoder_rng(cfg))
    return merge(state, {"queries": queries, "decoder": result})


def stage_render(state: State) -> State:
    cfg = state["config"]
    triplet = state["triplet"]
    renders = {
        f"{name}.ppm": render_heatmap(h, cfg.scale, cfg.upsample)
        for name, h in triplet.as_dict().items()
    }
    renders["mask.ppm"] = render_heatmap(state["mask"].mask, cfg.scale, "nearest")
    base = RasterImage.from_tensor(state["scene"].image)
    heat = render_heatmap(triplet.h_mixed, cfg.scale, cfg.upsample, with_heatbar=False)
    renders["overlay.ppm"] = append_heatbar(overlay(base, heat, cfg.alpha))
    return merge(state, {"renders": renders})


STAGES: List[Tuple[str, Callable[[State], State]]] = [
    ("scene", stage_scene),
    ("lsconv", stage_lsconv),
    ("heatmaps", stage_heatmaps),
    ("mask_pe", stage_mask_pe),
    ("encode", stage_encode),
    ("decode", stage_decode),
    ("render", stage_render),
]


def _guarded(name: str, stage: Callable[[State], State]) -> Callable[[State], State]:
    def run(state: State) -> State:
        logger.info(f"stage {name}")
        try:
            return stage(state)
        except HmpeError as err:
            logger.error(f"stage {name} failed: {err}")
            raise StageError(name, err) from err

    return run


def compute_pipeline(cfg: PipelineConfig, until: Optional[str] = None) -> State:
    """Run the stages in memory, stopping after `until` if given."""
    names = [name for name, _ in STAGES]
    if until is not None and until not in names:
        raise DomainError(f"unknown stage '{until}', expected one of {names}")
    stages = STAGES if until is None else STAGES[: names.index(until) + 1]
    return pipe({"config": cfg}, *(_guarded(name, fn) for name, fn in stages))


def write_artifacts(state: State, store: ArtifactStore) -> None:
    """Write every stage output present in `state`, stage by stage."""
    cfg = state["config"]
    cfg.save(store.path("config.txt"))
    if "scene" in state:
        store.write_tensor("activations", state["scene"].activations)
        store.write_tensor("image", state["scene"].image)
    if "lsconv_activations" in state:
        store.write_tensor("lsconv_activations", state["lsconv_activations"])
        store.write_sidecar("lsconv_penalty.txt", {"penalty": state["lsconv_penalty"]})
    if "triplet" in state:
        state["class_head"].save(store.path("class_head.hmpt"))
        state["bbox_head"].save(store.path("bbox_head.hmpt"))
        for name, h in state["triplet"].as_dict().items():
            store.write_tensor(name, h)
    if "mask" in state:
        store.write_tensor("mask_heat", state["mask_heat"])
        store.write_tensor("mask", state["mask"].mask)
        store.write_tensor("pe", state["pe"].pe)
    if "encoded" in state:
        store.write_tensor("k_enc", state["encoded"].k_enc)
        store.write_tensor("v_enc", state["encoded"].v_enc)
        store.write_tensor("attn_weights", state["encoded"].attn_weights)
    if "decoder" in state:
        queries = state["queries"]
        store.write_tensor("queries", queries.queries)
        store.write_tensor("query_scores", queries.scores)
        store.write_tensor("query_cells", np.asarray(queries.cells, dtype=np.float32))
        for index, out in enumerate(state["decoder"].outputs, start=1):
            store.write_tensor(f"decoder_layer_{index}", out)
        store.write_report("cost_report.txt", state["decoder"].report)
    for name, image in state.get("renders", {}).items():
        store.write_image(name, image)


def run_pipeline(cfg: PipelineConfig, out_dir: PathLike) -> Path:
    """Run every stage, write the artifacts and their manifest into `out_dir`."""
    store = ArtifactStore(out_dir)
    state = compute_pipeline(cfg)
    write_artifacts(state, store)
    store.write_manifest()
    logger.info(f"pipeline finished: {store.root}/")
    return store.root


def hot_query_in_box(cfg: PipelineConfig) -> bool:
    """True if any query surviving suppression sits on a cell inside the target box."""
    state = compute_pipeline(cfg, until="decode")
    inside = cells_in_box(cfg.box, cfg.grid).reshape(-1)
    return bool(np.any(inside[np.asarray(state["queries"].cells)]))


def random_scene_config(cfg: PipelineConfig, seed: int) -> PipelineConfig:
    """Config for `seed` with a seeded random target box."""
    target = random_target(Rng(seed).spawn(STREAMS["scene"], 99))
    return cfg.updated(seed=seed, target=str(target))


@dataclass(frozen=True)
class GradcheckInstance:
    """One seeded random instance: activations, both heads and a box target."""

    seed: int
    trial: int
    activations: np.ndarray
    class_head: ClassHead
    bbox_head: BboxHead
    target: BoxTarget

    @classmethod
    def draw(cls, seed: int, trial: int, dims: Tuple[int, int, int] = GRADCHECK_DIMS) -> "GradcheckInstance":
        rng = Rng(seed).spawn(trial)
        activations = np.asarray(rng.spawn(0).uniform(dims, -1.0, 1.0), dtype=np.float64)
        return cls(
            seed=seed,
            trial=trial,
            activations=activations,
            class_head=ClassHead.random(rng.spawn(1), dims),
            bbox_head=BboxHead.random(rng.spawn(2), dims),
            target=random_target(rng.spawn(3)),
        )

    def analytic(self, head: str, order: int) -> np.ndarray:
        if head == "class":
            return np.asarray(class_partials(self.class_head, self.activations, order), dtype=np.float64)
        return np.asarray(reg_partials(self.bbox_head, self.activations, self.target, order), dtype=np.float64)

    def numeric(self, head: str, order: int) -> np.ndarray:
        if head == "class":
            f = partial(class_score, self.class_head)
        else:
            f = partial(reg_loss, self.bbox_head, target=self.target)
        return np.asarray(finite_diff_grad(f, self.activations, order), dtype=np.float64)

    def max_rel_error(self, head: str, order: int) -> Tuple[float, int]:
        """Largest relative error over the checked elements, and how many were checked."""
        exact = self.analytic(head, order)
        checked = np.abs(exact) > MIN_ANALYTIC
        if not np.any(checked):
            return 0.0, 0
        approx = self.numeric(head, order)
        rel = np.abs(approx[checked] - exact[checked]) / np.abs(exact[checked])
        return float(rel.max()), int(checked.sum())


@dataclass
class GradcheckResult:
    report: pd.DataFrame
    worst: Optional[GradcheckInstance]

    @property
    def passed(self) -> bool:
        return bool(self.report["passed"].all())

    def dump_worst(self, store: ArtifactStore) -> None:
        """Write the worst failing instance so it can be replayed."""
        if self.worst is None:
            return
        failing = self.report[~self.report["passed"]].iloc[0]
        store.write_tensor("worst_activations", self.worst.activations)
        self.worst.class_head.save(store.path("worst_class_head.hmpt"))
        self.worst.bbox_head.save(store.path("worst_bbox_head.hmpt"))
        store.write_sidecar("worst_instance.txt", {
            "seed": self.worst.seed,
            "trial": self.worst.trial,
            "head": failing["head"],
            "order": int(failing["order"]),
            "target": str(self.worst.target),
        })


def gradcheck(
    seed: int,
    trials: int,
    dims: Tuple[int, int, int] = GRADCHECK_DIMS,
    progress: bool = True,
) -> GradcheckResult:
    """Compare closed-form partials of both heads with central differences.

    Returns a table with one row per (head, order): the worst relative error over
    all trials, its tolerance, the number of elements checked and the trial that
    produced the worst error.
    """
    if trials < 1:
        raise DomainError(f"gradcheck needs at least one trial, got {trials}")
    worst: Dict[Tuple[str, int], Tuple[float, int]] = {
        (head, order): (0.0, 0) for head in ("class", "bbox") for order in TOLERANCES
    }
    checked = dict.fromkeys(worst, 0)
    for trial in tqdm(range(trials), desc="gradcheck", disable=not progress):
        instance = GradcheckInstance.draw(seed, trial, dims)
        for key in worst:
            err, count = instance.max_rel_error(*key)
            checked[key] += count
            if err > worst[key][0]:
                worst[key] = (err, trial)

    rows = [
        {
            "head": head,
            "order": order,
            "max_rel_err": err,
            "tolerance": TOLERANCES[order],
            "elements": checked[(head, order)],
            "worst_trial": trial,
            "passed": err <= TOLERANCES[order],
        }
        for (head, order), (err, trial) in worst.items()
    ]
    report = pd.DataFrame(rows)
    failing = report[~report["passed"]]
    dump = None
    if len(failing):
        first = failing.iloc[0]
        logger.error(f"gradcheck breach: {first['head']} order {first['order']} rel err {first['max_rel_err']:.3g}")
        dump = GradcheckInstance.draw(seed, int(first["worst_trial"]), dims)
    return GradcheckResult(report=report, worst=dump)


def require_passed(result: GradcheckResult) -> None:
    if not result.passed:
        raise VerificationError("gradcheck tolerance exceeded")
