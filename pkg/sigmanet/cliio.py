"""KRD k-space files, mask/image files and the sigmanet command line."""
import argparse
import logging
import os
import struct
import sys

import numpy as np
from dotenv import load_dotenv

from .core import (BadMagic, ConfigError, HeaderMismatch, KSpaceVolume, SamplingMask, SensitivitySet, SigmaNetError,
                   ShapeMismatch, TruncatedFile, load_run_config, read_config_file, seeded_rng)
from .datasim import (PhantomSpec, build_examples, estimate_volume_sensitivities,
                      foreground_mask, make_mask, make_phantom_volume, parse_phantom_spec, replace_volume_background,
                      undersample)
from .evalens import EnsembleInputs, ensemble, export_png, metrics_report, write_report
from .learn import finetune, stl_apply, stl_train, train
from .net import DenoiserParams
from .operators import rss
from .unrolled import UnrolledModel, load_model, reconstruct_volume, save_model

logger = logging.getLogger(__name__)

KRD_MAGIC = b"KRD1"
KRD_VERSION = 1
_KRD_HEADER = struct.Struct("<4sIIIIIIIId")
FLAG_MASK = 1
FLAG_SENS = 2

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2

# RNG streams derived from the run seed
STREAM_SIMULATE = 1
STREAM_MASK = 2
STREAM_INIT = 3
STREAM_EXAMPLES = 4


def krd_to_bytes(volume, sens=None):
    """
    Serializes a volume (and optional maps) to KRD bytes.

    Layout: header, complex k-space (S, Q, PE, FE) as little-endian float64
    pairs, one byte per PE line of mask flags, then the (N_maps, Q, PE, FE)
    sensitivity block when present.
    """
    n_slices, coils, pe, fe = volume.data.shape
    flags = FLAG_MASK | (FLAG_SENS if sens is not None else 0)
    n_maps = sens.n_maps if sens is not None else 0
    if sens is not None and sens.maps.shape[1:] != (coils, pe, fe):
        raise HeaderMismatch(f"sensitivity block {sens.maps.shape} does not match k-space {volume.data.shape}")
    header = _KRD_HEADER.pack(KRD_MAGIC, KRD_VERSION, n_slices, coils, pe, fe, flags,
                              volume.mask.acl_count, n_maps, float(volume.mask.nominal_r))
    parts = [header,
             np.ascontiguousarray(volume.data, dtype="<c16").tobytes(),
             volume.mask.pe_line_flags.astype(np.uint8).tobytes()]
    if sens is not None:
        parts.append(np.ascontiguousarray(sens.maps, dtype="<c16").tobytes())
    return b"".join(parts)


def krd_from_bytes(blob):
    """
    Parses KRD bytes.

    Returns:
        tuple: (KSpaceVolume, SensitivitySet or None).

    Raises:
        BadMagic: wrong file signature.
        TruncatedFile: payload shorter than the header declares.
        HeaderMismatch: unsupported header fields or trailing bytes.
    """
    if len(blob) < 4 or blob[:4] != KRD_MAGIC:
        raise BadMagic(f"expected {KRD_MAGIC!r}, got {bytes(blob[:4])!r}")
    if len(blob) < _KRD_HEADER.size:
        raise TruncatedFile(f"KRD header needs {_KRD_HEADER.size} bytes, got {len(blob)}")
    _, version, n_slices, coils, pe, fe, flags, acl_count, n_maps, nominal_r = _KRD_HEADER.unpack_from(blob)
    if version != KRD_VERSION:
        raise HeaderMismatch(f"unsupported KRD version {version}")
    if flags & ~(FLAG_MASK | FLAG_SENS):
        raise HeaderMismatch(f"unknown KRD flags {flags:#x}")
    has_sens = bool(flags & FLAG_SENS)
    if has_sens and n_maps not in (1, 2):
        raise HeaderMismatch(f"sensitivity block declares {n_maps} map sets")
    kspace_bytes = 16 * n_slices * coils * pe * fe
    mask_bytes = pe if flags & FLAG_MASK else 0
    sens_bytes = 16 * n_maps * coils * pe * fe if has_sens else 0
    needed = _KRD_HEADER.size + kspace_bytes + mask_bytes + sens_bytes
    if len(blob) < needed:
        raise TruncatedFile(f"KRD header declares {needed} bytes, file has {len(blob)}")
    if len(blob) > needed:
        raise HeaderMismatch(f"{len(blob) - needed} trailing bytes after KRD payload")

    offset = _KRD_HEADER.size
    data = np.frombuffer(blob, dtype="<c16", count=n_slices * coils * pe * fe, offset=offset)
    data = data.astype(np.complex128).reshape(n_slices, coils, pe, fe)
    offset += kspace_bytes
    if flags & FLAG_MASK:
        line_flags = np.frombuffer(blob, dtype=np.uint8, count=pe, offset=offset)
        if np.any(line_flags > 1):
            raise HeaderMismatch("mask bytes must be 0 or 1")
        mask = SamplingMask(line_flags.astype(bool), acl_count, nominal_r)
        offset += mask_bytes
    else:
        mask = SamplingMask.full(pe)
    sens = None
    if has_sens:
        maps = np.frombuffer(blob, dtype="<c16", count=n_maps * coils * pe * fe, offset=offset)
        sens = SensitivitySet(maps.astype(np.complex128).reshape(n_maps, coils, pe, fe))
    return KSpaceVolume(data, mask), sens


def write_krd(path, volume, sens=None):
    with open(path, "wb") as file:
        file.write(krd_to_bytes(volume, sens))
    logger.info("KRD file written to %s", path)


def read_krd(path):
    with open(path, "rb") as file:
        return krd_from_bytes(file.read())


def save_mask(path, mask):
    np.savez(path, flags=mask.pe_line_flags, acl_count=mask.acl_count, nominal_r=mask.nominal_r)


def load_mask(path):
    with np.load(path) as data:
        return SamplingMask(data["flags"], int(data["acl_count"]), float(data["nominal_r"]))


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _env_int(name, default):
    raw = os.getenv(name)
    if raw is None or raw == "":
        return default
    try:
        return int(raw)
    except ValueError as e:
        raise ConfigError(f"{name} must be an integer, got {raw!r}") from e


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="run seed (overrides the config file)")
    common.add_argument("--config", default=os.getenv("SIGMANET_CONFIG_PATH"), help="key = value config file")
    common.add_argument("--out", default=os.getenv("SIGMANET_OUTPUT_PATH") or ".", help="output directory")
    common.add_argument("--threads", type=int, default=None, help="slice-parallel worker threads")

    parser = _Parser(prog="sigmanet", description="Unrolled parallel-MRI reconstruction toolkit")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", parents=[common], help="render a multi-coil phantom volume")
    p.add_argument("--slices", type=int, default=1)

    p = sub.add_parser("mask", parents=[common], help="draw a PE-line undersampling mask")
    p.add_argument("--pe", type=int, help="PE lines (taken from --input when given)")
    p.add_argument("--R", dest="r", type=float, required=True)
    p.add_argument("--acl", type=int, required=True)
    p.add_argument("--input", help="KRD volume to undersample with the drawn mask")

    p = sub.add_parser("sens", parents=[common], help="estimate sensitivity maps from calibration lines")
    p.add_argument("--input", required=True)
    p.add_argument("--n-maps", type=int, default=1, choices=[1, 2])

    p = sub.add_parser("recon", parents=[common], help="reconstruct a KRD volume with a checkpoint")
    p.add_argument("--input", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--reference", help="ground-truth .npy volume for a metrics report")
    p.add_argument("--replace-background", action="store_true")
    p.add_argument("--threshold", type=float, default=0.1)

    p = sub.add_parser("train", parents=[common], help="supervised training on a fully sampled KRD volume")
    p.add_argument("--input", required=True)
    p.add_argument("--R", dest="r", type=float, default=4.0)
    p.add_argument("--acl", type=int, default=30)
    p.add_argument("--model", help="checkpoint to continue from")
    p.add_argument("--known-sens", action="store_true", help="use the maps stored in the KRD file")

    p = sub.add_parser("finetune", parents=[common], help="adapt a checkpoint to one undersampled volume")
    p.add_argument("--input", required=True)
    p.add_argument("--model", required=True)

    p = sub.add_parser("stl", parents=[common], help="train or apply the style-transfer layer")
    p.add_argument("--input", required=True, help="source magnitude .npy (S, H, W)")
    p.add_argument("--target", help="target magnitude .npy for training")
    p.add_argument("--apply", help="trained STL parameter file to apply")

    p = sub.add_parser("ensemble", parents=[common], help="combine reconstructions into the Sigma-net image")
    p.add_argument("--sn", nargs="+", required=True, help="SN-family reconstructions")
    p.add_argument("--pcn", required=True)
    p.add_argument("--sn-ft", required=True)
    p.add_argument("--mask", help="foreground mask .npy; derived from the SN mean when omitted")
    p.add_argument("--threshold", type=float, default=0.1)

    p = sub.add_parser("eval", parents=[common], help="metrics of reconstructions against a reference")
    p.add_argument("--input", nargs="+", required=True)
    p.add_argument("--reference", required=True)

    p = sub.add_parser("init", parents=[common], help="write an untrained checkpoint for a run config")
    p.add_argument("--coils", type=int, required=True)
    p.add_argument("--zero", action="store_true", help="zero denoiser weights")
    return parser


def _run_config(args):
    overrides = {} if args.seed is None else {"seed": str(args.seed)}
    return load_run_config(args.config, overrides)


def _out(args, name):
    os.makedirs(args.out, exist_ok=True)
    return os.path.join(args.out, name)


def _threads(args):
    return args.threads if args.threads is not None else _env_int("SIGMANET_THREADS", 1)


def _stack(volume):
    volume = np.asarray(volume, dtype=np.float64)
    return volume[None] if volume.ndim == 2 else volume


def cmd_simulate(args):
    if args.config:
        spec = parse_phantom_spec(read_config_file(args.config, "phantom"))
    else:
        spec = PhantomSpec()
    seed = args.seed if args.seed is not None else 0
    phantom = make_phantom_volume(spec, args.slices, seeded_rng(seed, STREAM_SIMULATE))
    write_krd(_out(args, "kspace.krd"), phantom.kspace, phantom.sens)
    np.save(_out(args, "truth.npy"), rss(phantom.coil_images.transpose(1, 0, 2, 3)))
    np.save(_out(args, "objects.npy"), phantom.objects)
    print(f"Simulated {args.slices} slice(s) of {spec.height}x{spec.width} with {spec.coil_count} coils to {args.out}")


def cmd_mask(args):
    seed = args.seed if args.seed is not None else 0
    volume = sens = None
    if args.input:
        volume, sens = read_krd(args.input)
    pe = volume.mask.pe_lines if volume is not None else args.pe
    if pe is None:
        raise UsageError("mask needs --pe or --input")
    mask = make_mask(pe, args.r, args.acl, seeded_rng(seed, STREAM_MASK))
    save_mask(_out(args, "mask.npz"), mask)
    if volume is not None:
        write_krd(_out(args, "kspace_under.krd"), undersample(volume, mask), sens)
    print(f"Mask: {mask.flagged} of {pe} PE lines flagged (R={mask.true_r:.2f}, {mask.acl_count} ACLs)")


def cmd_sens(args):
    volume, _ = read_krd(args.input)
    sens = estimate_volume_sensitivities(volume, args.n_maps)
    write_krd(_out(args, "kspace_sens.krd"), volume, sens)
    np.save(_out(args, "sens.npy"), sens.maps)
    print(f"Estimated {sens.n_maps} map set(s) for {sens.coil_count} coils from {volume.mask.acl_count} ACLs")


def cmd_recon(args):
    volume, sens = read_krd(args.input)
    model = load_model(args.model)
    images = reconstruct_volume(model, volume, sens, threads=_threads(args))
    if args.replace_background:
        images = replace_volume_background(images, volume, args.threshold)
    np.save(_out(args, "recon.npy"), images)
    export_png(images, _out(args, "png"), "recon")
    print(f"Reconstructed {volume.n_slices} slice(s) with {model.variant}-{model.dc.kind}, T={model.steps}")
    if args.reference:
        report = metrics_report({"recon": (images, _stack(np.load(args.reference)))})
        write_report(report, _out(args, "metrics.csv"))
        _print_summary(report)


def cmd_train(args):
    cfg = _run_config(args)
    volume, sens = read_krd(args.input)
    examples = build_examples(volume, cfg.variant, args.r, args.acl, seeded_rng(cfg.seed, STREAM_EXAMPLES),
                              n_maps=cfg.n_maps, estimate=not args.known_sens, sens=sens)
    if args.model:
        model = load_model(args.model)
    else:
        model = UnrolledModel.from_config(cfg, volume.coil_count, seeded_rng(cfg.seed, STREAM_INIT))
    model, log = train(model, examples, cfg, log_path=_out(args, "train_log.csv"))
    save_model(model, _out(args, "model.sgn"))
    first = log[log.epoch == log.epoch.min()].loss.mean()
    last = log[log.epoch == log.epoch.max()].loss.mean()
    print(f"Trained {cfg.variant}-{cfg.dc_kind} for {cfg.epochs} epochs: loss {first:.6f} -> {last:.6f}")


def cmd_finetune(args):
    cfg = _run_config(args)
    volume, sens = read_krd(args.input)
    model = load_model(args.model)
    tuned = finetune(model, volume, cfg, sens=sens, log_path=_out(args, "finetune_log.csv"))
    save_model(tuned, _out(args, "model_ft.sgn"))
    images = reconstruct_volume(tuned, volume, sens, threads=_threads(args))
    np.save(_out(args, "recon_ft.npy"), images)
    print(f"Finetuned for {cfg.finetune_epochs} epochs on {min(cfg.finetune_slices, volume.n_slices)} slice(s)")


def cmd_stl(args):
    source = _stack(np.load(args.input))
    if args.apply:
        with open(args.apply, "rb") as file:
            params = DenoiserParams.from_bytes(file.read())
        np.save(_out(args, "stl_out.npy"), np.stack([stl_apply(params, image) for image in source]))
        print(f"Applied style-transfer layer to {len(source)} slice(s)")
        return
    if not args.target:
        raise UsageError("stl needs --target for training or --apply for inference")
    cfg = _run_config(args)
    target = _stack(np.load(args.target))
    params = stl_train(list(zip(source, target)), cfg)
    path = _out(args, "stl.sgp")
    with open(path, "wb") as file:
        file.write(params.to_bytes())
    print(f"Trained style-transfer layer for {cfg.stl_epochs} epochs, written to {path}")


def cmd_ensemble(args):
    sn_family = [_stack(np.load(p)) for p in args.sn]
    x_pcn = _stack(np.load(args.pcn))
    x_sn_ft = _stack(np.load(args.sn_ft))
    x_sn = np.mean(np.stack(sn_family), axis=0)
    if args.mask:
        masks = _stack(np.load(args.mask)).astype(bool)
    else:
        masks = np.stack([foreground_mask(image, args.threshold).pixels for image in x_sn])
    if masks.shape != x_sn.shape:
        raise ShapeMismatch(f"mask shape {masks.shape} does not match images {x_sn.shape}")
    images = np.stack([
        ensemble(EnsembleInputs.from_reconstructions([v[s] for v in sn_family], x_pcn[s], x_sn_ft[s], masks[s]))
        for s in range(x_sn.shape[0])
    ])
    np.save(_out(args, "sigmanet.npy"), images)
    print(f"Ensembled {len(sn_family)} SN, 1 PCN and 1 finetuned reconstruction(s) over {len(images)} slice(s)")


def cmd_eval(args):
    reference = _stack(np.load(args.reference))
    volumes = {os.path.splitext(os.path.basename(p))[0]: (_stack(np.load(p)), reference) for p in args.input}
    report = metrics_report(volumes)
    write_report(report, _out(args, "metrics.csv"))
    _print_summary(report)


def cmd_init(args):
    cfg = _run_config(args)
    model = UnrolledModel.from_config(cfg, args.coils, seeded_rng(cfg.seed, STREAM_INIT), zero=args.zero)
    path = _out(args, "model.sgn")
    save_model(model, path)
    print(f"Initialized {cfg.variant}-{cfg.dc_kind} checkpoint with T={cfg.steps} at {path}")


def _print_summary(report):
    for row in report[report.slice == "all"].itertuples():
        print(f"{row.volume}: NMSE {row.nmse:.6g}  PSNR {row.psnr:.3f} dB  SSIM {row.ssim:.4f}")


COMMANDS = {
    "simulate": cmd_simulate,
    "mask": cmd_mask,
    "sens": cmd_sens,
    "recon": cmd_recon,
    "train": cmd_train,
    "finetune": cmd_finetune,
    "stl": cmd_stl,
    "ensemble": cmd_ensemble,
    "eval": cmd_eval,
    "init": cmd_init,
}


def main(argv=None):
    """Runs one subcommand; returns 0 on success, 1 on usage errors, 2 on data errors."""
    load_dotenv()
    logging.basicConfig(level=os.getenv("SIGMANET_LOG_LEVEL", "WARNING").upper(),
                        format="%(asctime)s %(name)s %(levelname)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        COMMANDS[args.command](args)
    except (UsageError, ConfigError) as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (SigmaNetError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK
