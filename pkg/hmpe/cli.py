"""
Command-line entry point `hmpe`.

Every subcommand is a pure function of its config and input files. Exit codes:
0 on success, 1 on usage or input errors, 2 when a verification fails
(gradcheck tolerance breach, manifest mismatch).

    hmpe synth --seed 3 --out scene/
    hmpe run-pipeline --layers 8 --out runs/l8/
    hmpe gradcheck --trials 100
"""
import argparse
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from hmpe import logger, set_verbosity
from hmpe.heads import BboxHead, ClassHead
from hmpe.heatmaps import HeatmapTriplet, heatmap_triplet, mix_heatmaps
from hmpe.hidq import MAX_LAYERS, ablate_decoder, decoder_stack, init_queries, suppress_queries
from hmpe.lsconv import (
    continuity_penalty,
    fuse_paths,
    linear_conv,
    lsconv_block,
    lsconv_channels,
    predict_offsets,
    snake_conv,
)
from hmpe.maskpe import MaskFilter, PosEncoding, mask_from_heatmap, masked_pe, sinusoidal_pe
from hmpe.mohfe import EmbeddingSeq, embed_heatmap, encode
from hmpe.pipeline import (
    calibrated_heads,
    compute_pipeline,
    decoder_config,
    decoder_rng,
    gradcheck,
    heat_projections,
    lsconv_weights,
    mask_heat,
    qkv_projections,
    query_projection,
    run_pipeline,
)
from hmpe.synth import synth
from hmpe.utils.artifacts import ArtifactStore, report_to_text
from hmpe.utils.config import PipelineConfig, load_config
from hmpe.utils.errors import HmpeError, VerificationError
from hmpe.utils.numerics import Tensor
from hmpe.utils.plotting import RasterImage, append_heatbar, overlay, read_image, render_heatmap, write_ppm
from hmpe.utils.tensor_io import read_tensor, write_sidecar, write_tensor

EXIT_OK, EXIT_USAGE, EXIT_VERIFY = 0, 1, 2
# where a failing gradcheck is dumped when --out is not given
DEFAULT_GRADCHECK_DIR = Path("gradcheck_failures")

# flags that mirror PipelineConfig keys; everything else is subcommand-local
CONFIG_FLAGS = (
    "seed", "height", "width", "channels", "depth", "heads", "layers", "points", "lam", "tau",
    "fusion_w", "huber_delta", "scale", "alpha", "top_m", "target", "bbox_grad_order",
    "unit_shift", "taps", "reweight", "upsample", "mask_source", "scales",
)


class HmpeArgumentParser(argparse.ArgumentParser):
    """argparse parser that exits with status 1 on usage errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common_options() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="key=value config file.")
    common.add_argument("--seed", type=int, default=None, help="Root seed (overrides HMPE_SEED).")
    common.add_argument("--quiet", action="store_true", help="Only log errors.")
    common.add_argument("--debug", action="store_true", help="Log debug detail.")
    return common


def _grid_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--height", type=int, default=None)
    parser.add_argument("--width", type=int, default=None)
    parser.add_argument("--channels", type=int, default=None)
    parser.add_argument("--scale", type=int, default=None, help="Image pixels per grid cell.")
    parser.add_argument("--target", type=str, default=None, help="Box as cx,cy,w,h in [0, 1].")


def _model_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--depth", type=int, default=None)
    parser.add_argument("--heads", type=int, default=None)
    parser.add_argument("--layers", type=int, default=None)
    parser.add_argument("--points", type=int, default=None)
    parser.add_argument("--lambda", dest="lam", type=float, default=None)
    parser.add_argument("--tau", type=float, default=None)
    parser.add_argument("--fusion", dest="fusion_w", type=float, default=None)
    parser.add_argument("--huber-delta", dest="huber_delta", type=float, default=None)
    parser.add_argument("--alpha", type=float, default=None, help="Overlay blend weight.")
    parser.add_argument("--top-m", dest="top_m", type=int, default=None)
    parser.add_argument("--bbox-grad-order", dest="bbox_grad_order", choices=("1", "mixed"), default=None)
    parser.add_argument("--no-unit-shift", dest="unit_shift", action="store_const", const=False, default=None)
    parser.add_argument("--taps", type=int, choices=(3, 9), default=None)
    parser.add_argument("--reweight", choices=("hard", "soft"), default=None)
    parser.add_argument("--upsample", choices=("nearest", "bilinear"), default=None)
    parser.add_argument("--mask-source", dest="mask_source", choices=("mixed", "class", "bbox"), default=None)
    parser.add_argument("--scales", type=str, default=None, help="Pyramid scales, e.g. 1,2,4.")


def build_parser() -> argparse.ArgumentParser:
    common = _common_options()
    parser = HmpeArgumentParser(prog="hmpe", description="Heatmap-gated positional embeddings at desk scale.")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    def add(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, parents=[common], help=help_text)
        _grid_options(p)
        _model_options(p)
        return p

    p = add("synth", "Generate a synthetic scene.")
    p.add_argument("--out", type=Path, required=True)

    p = add("gen-heatmap", "Class, box and mixed heatmaps of an activation tensor.")
    p.add_argument("--activations", type=Path, required=True)
    p.add_argument("--class-head", dest="class_head", type=Path, default=None)
    p.add_argument("--bbox-head", dest="bbox_head", type=Path, default=None)
    p.add_argument("--out", type=Path, required=True)

    p = add("mask-pe", "Mask filter and masked positional encoding of a heatmap.")
    p.add_argument("--heatmap", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="Masked PE tensor file.")
    p.add_argument("--mask-out", dest="mask_out", type=Path, default=None, help="Binary mask tensor file.")

    p = add("encode", "Fuse class and box embeddings and run encoder attention.")
    p.add_argument("--class-heat", dest="class_heat", type=Path, required=True)
    p.add_argument("--bbox-heat", dest="bbox_heat", type=Path, required=True)
    p.add_argument("--pe", type=Path, default=None, help="Masked PE file; built from --tau and --depth when omitted.")
    p.add_argument("--out", type=Path, required=True)

    p = add("decode", "Induce queries from the mixed heatmap and run the decoder stack.")
    p.add_argument("--mixed-heat", dest="mixed_heat", type=Path, required=True)
    p.add_argument("--enc", type=Path, required=True, help="Directory written by `encode`.")
    p.add_argument("--out", type=Path, required=True)

    p = add("lsconv", "Linear-Snake convolution of a feature map.")
    p.add_argument("--feature", type=Path, required=True)
    p.add_argument("--axis", choices=("x", "y", "both"), default="both")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--penalty-out", dest="penalty_out", type=Path, default=None)

    p = add("render", "Render a heatmap with its heatbar as PPM.")
    p.add_argument("--heatmap", type=Path, required=True)
    p.add_argument("--base", type=Path, default=None, help="Image to blend the heatmap onto.")
    p.add_argument("--out", type=Path, required=True)

    p = add("run-pipeline", "Run every stage and write a manifest.")
    p.add_argument("--out", type=Path, required=True)

    p = add("gradcheck", "Check closed-form head partials against finite differences.")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--out", type=Path, default=None, help="Directory for the report and failure dumps (failures default to ./gradcheck_failures).")

    p = add("ablate-decoder", "Decoder depth ablation report.")
    p.add_argument("--layers-from", dest="layers_from", type=int, default=1)
    p.add_argument("--layers-to", dest="layers_to", type=int, default=MAX_LAYERS)
    p.add_argument("--out", type=Path, default=None, help="Report file; printed when omitted.")

    p = sub.add_parser("verify-manifest", parents=[common], help="Check an artifact directory's manifest.")
    p.add_argument("--dir", dest="directory", type=Path, required=True)
    return parser


def config_from_args(args: argparse.Namespace) -> PipelineConfig:
    overrides: Dict[str, Any] = {key: getattr(args, key, None) for key in CONFIG_FLAGS}
    return load_config(args.config, overrides)


def _pe_from_file(path: Path) -> PosEncoding:
    return PosEncoding(pe=read_tensor(path))


def cmd_synth(args, cfg: PipelineConfig) -> int:
    scene = synth(cfg.seed, (cfg.channels, cfg.height, cfg.width), cfg.box, cfg.scale)
    store = ArtifactStore(args.out)
    store.write_tensor("activations", scene.activations)
    store.write_tensor("image", scene.image)
    store.write_image("image.ppm", RasterImage.from_tensor(scene.image))
    store.write_sidecar("target.txt", {"target": str(scene.target), "seed": cfg.seed})
    return EXIT_OK


def cmd_gen_heatmap(args, cfg: PipelineConfig) -> int:
    activations = read_tensor(args.activations)
    class_head, bbox_head = calibrated_heads(cfg, activations)
    if args.class_head is not None:
        class_head = ClassHead.load(args.class_head)
    if args.bbox_head is not None:
        bbox_head = BboxHead.load(args.bbox_head)
    triplet = heatmap_triplet(class_head, bbox_head, activations, cfg.box, cfg.lam, cfg.bbox_grad_order)
    store = ArtifactStore(args.out)
    for name, h in triplet.as_dict().items():
        store.write_tensor(name, h)
    return EXIT_OK


def mask_and_pe(cfg: PipelineConfig, heat: Tensor) -> Tuple[MaskFilter, PosEncoding]:
    mask = mask_from_heatmap(mask_heat(cfg, heat), cfg.tau)
    logger.info(f"{mask.hot_fraction:.1%} of cells hot at tau={cfg.tau}")
    return mask, masked_pe(sinusoidal_pe(heat.shape[0], heat.shape[1], cfg.depth), mask)


def cmd_mask_pe(args, cfg: PipelineConfig) -> int:
    mask, pe = mask_and_pe(cfg, read_tensor(args.heatmap))
    write_tensor(args.out, pe.pe)
    if args.mask_out is not None:
        write_tensor(args.mask_out, mask.mask)
    return EXIT_OK


def cmd_encode(args, cfg: PipelineConfig) -> int:
    h_class, h_bbox = read_tensor(args.class_heat), read_tensor(args.bbox_heat)
    store = ArtifactStore(args.out)
    if args.pe is not None:
        pe = _pe_from_file(args.pe)
        cfg = cfg.updated(depth=pe.depth)
    else:
        triplet = HeatmapTriplet(h_class, h_bbox, mix_heatmaps(h_class, h_bbox, cfg.lam), cfg.lam)
        mask, pe = mask_and_pe(cfg, triplet.select(cfg.mask_source))
        store.write_tensor("mask", mask.mask)
    proj = heat_projections(cfg)
    e_class = embed_heatmap(h_class, proj[0], pe, "class")
    e_bbox = embed_heatmap(h_bbox, proj[1], pe, "bbox")
    encoded = encode(e_class, e_bbox, qkv_projections(cfg), cfg.heads)
    store.write_tensor("q", encoded.q)
    store.write_tensor("k_enc", encoded.k_enc)
    store.write_tensor("v_enc", encoded.v_enc)
    store.write_tensor("attn_weights", encoded.attn_weights)
    store.write_tensor("pe", pe.pe)
    return EXIT_OK


def cmd_decode(args, cfg: PipelineConfig) -> int:
    enc = ArtifactStore(args.enc)
    pe = PosEncoding(pe=enc.read_tensor("pe"))
    cfg = cfg.updated(depth=pe.depth)
    e_mixed: EmbeddingSeq = embed_heatmap(read_tensor(args.mixed_heat), heat_projections(cfg)[2], pe, "mixed")
    queries = suppress_queries(init_queries(e_mixed, query_projection(cfg)), cfg.tau, cfg.top_m, cfg.reweight)
    result = decoder_stack(
        decoder_config(cfg), queries, enc.read_tensor("k_enc"), enc.read_tensor("v_enc"), decoder_rng(cfg)
    )
    store = ArtifactStore(args.out)
    store.write_tensor("queries", queries.queries)
    store.write_tensor("query_cells", np.asarray(queries.cells, dtype=np.float32))
    for index, out in enumerate(result.outputs, start=1):
        store.write_tensor(f"decoder_layer_{index}", out)
    store.write_report("cost_report.txt", result.report)
    print(report_to_text(result.report), end="")
    return EXIT_OK


def cmd_lsconv(args, cfg: PipelineConfig) -> int:
    feature = read_tensor(args.feature)
    weights = lsconv_weights(cfg)
    if feature.ndim == 3:
        out, penalty = lsconv_channels(feature, weights, cfg.fusion_w, cfg.unit_shift)
    elif args.axis == "both":
        out, penalty = lsconv_block(feature, weights, cfg.fusion_w, cfg.unit_shift)
    else:
        offsets = predict_offsets(feature, weights.predictor)
        strip = weights.x_kernel if args.axis == "x" else weights.y_kernel
        path_kernel = weights.x_path_kernel if args.axis == "x" else weights.y_path_kernel
        snake = snake_conv(feature, path_kernel or strip, offsets, args.axis, cfg.unit_shift)
        out = fuse_paths(snake, linear_conv(feature, strip, args.axis), cfg.fusion_w)
        penalty = continuity_penalty(offsets)
    write_tensor(args.out, out)
    if args.penalty_out is not None:
        write_sidecar(args.penalty_out, {"penalty": penalty})
    logger.info(f"continuity penalty {penalty:.6g}")
    return EXIT_OK


def cmd_render(args, cfg: PipelineConfig) -> int:
    heat = read_tensor(args.heatmap)
    if args.base is None:
        image = render_heatmap(heat, cfg.scale, cfg.upsample)
    else:
        body = render_heatmap(heat, cfg.scale, cfg.upsample, with_heatbar=False)
        image = append_heatbar(overlay(read_image(args.base), body, cfg.alpha))
    args.out.parent.mkdir(parents=True, exist_ok=True)
    write_ppm(args.out, image)
    return EXIT_OK


def cmd_run_pipeline(args, cfg: PipelineConfig) -> int:
    run_pipeline(cfg, args.out)
    return EXIT_OK


def cmd_gradcheck(args, cfg: PipelineConfig) -> int:
    result = gradcheck(cfg.seed, args.trials, progress=not args.quiet)
    print(report_to_text(result.report), end="")
    out = args.out
    if out is None and not result.passed:
        out = DEFAULT_GRADCHECK_DIR
        logger.info(f"writing the failing instance to {out}/")
    if out is not None:
        store = ArtifactStore(out)
        store.write_report("gradcheck_report.txt", result.report)
        result.dump_worst(store)
    if not result.passed:
        logger.error("gradcheck tolerance exceeded")
        return EXIT_VERIFY
    return EXIT_OK


def cmd_ablate_decoder(args, cfg: PipelineConfig) -> int:
    state = compute_pipeline(cfg, until="encode")
    queries = suppress_queries(
        init_queries(state["e_mixed"], query_projection(cfg)), cfg.tau, cfg.top_m, cfg.reweight
    )
    encoded = state["encoded"]
    report = ablate_decoder(
        decoder_config(cfg), queries, encoded.k_enc, encoded.v_enc, decoder_rng(cfg),
        args.layers_from, args.layers_to, progress=not args.quiet,
    )
    text = report_to_text(report)
    if args.out is not None:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(text, encoding="utf-8")
    else:
        print(text, end="")
    if not report["matches_closed_form"].all():
        logger.error("counted MACs differ from the closed form")
        return EXIT_VERIFY
    return EXIT_OK


def cmd_verify_manifest(args, cfg: Optional[PipelineConfig]) -> int:
    ArtifactStore(args.directory).verify()
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "gen-heatmap": cmd_gen_heatmap,
    "mask-pe": cmd_mask_pe,
    "encode": cmd_encode,
    "decode": cmd_decode,
    "lsconv": cmd_lsconv,
    "render": cmd_render,
    "run-pipeline": cmd_run_pipeline,
    "gradcheck": cmd_gradcheck,
    "ablate-decoder": cmd_ablate_decoder,
    "verify-manifest": cmd_verify_manifest,
}


def main(argv: Optional[List[str]] = None) -> int:
    """Parse arguments, run one subcommand and return its exit code."""
    args = build_parser().parse_args(argv)
    set_verbosity(verbose=not args.quiet, debug=args.debug)
    try:
        cfg = None if args.command == "verify-manifest" else config_from_args(args)
        return COMMANDS[args.command](args, cfg)
    except VerificationError as err:
        logger.error(str(err))
        return EXIT_VERIFY
    except HmpeError as err:
        logger.error(str(err))
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
