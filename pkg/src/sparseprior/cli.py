"""Command-line entry point: ``sparseprior <command> [flags]``.

Every command reads its parameters from built-in defaults, then an
optional ``--config`` JSON file, then explicit flags (last wins).  The
JSON file may hold top-level keys shared by several commands and
per-command objects keyed by the command name, e.g.::

    {"seed": 3, "train": {"n": 24, "patch": 5}, "eval": {"sigmas": [15, 25]}}

Exit codes: 0 success, 1 invalid input or failed check, 2 compute failure.
"""

import argparse
import csv
import io
import json
import logging
import sys
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import bilevel, lbfgs
from . import penalty as pen
from .filterbank import FilterBank, bank_from_dict, dct_mean_zero_basis, format_kernels, save_model
from .imagecore import (ImageError, PgmError, add_gaussian_noise, atomic_write, load_image,
                        load_samples, make_dataset, psnr, save_npy, save_pgm, write_manifest)
from .lowersolver import (ANALYSIS, DENOISE_CONFIG, ConvergenceError, SolverConfig,
                          denoise_analysis, denoise_synthesis, tune_strength)
from .rng import derive_seed

log = logging.getLogger("sparseprior")

EXIT_OK, EXIT_INVALID, EXIT_COMPUTE = 0, 1, 2

TV_NAMES = ("tv", "tv_builtin")
TV_LABEL = "tv-smoothed"
# Strength of the built-in TV bank per unit of noise sigma; the best value
# on natural-image crops at sigma = 15 is close to 15.
TV_STRENGTH_PER_SIGMA = 1.0


class UsageError(Exception):
    """Invalid flags, config or inputs (exit code 1)."""


class NoInputs(UsageError):
    """An input directory holds no usable images."""


# ---------------------------------------------------------------------------
# parameter schema


def _path(v):
    return str(v)


def _floats(v):
    if isinstance(v, str):
        v = [x for x in v.replace(",", " ").split() if x]
    return [float(x) for x in v]


def _strs(v):
    if isinstance(v, str):
        v = [v]
    return [str(x) for x in v]


@dataclass(frozen=True)
class Param:
    kind: type  # int, float, str, bool, list
    default: object = None
    help: str = ""
    choices: tuple = None
    convert: object = None


COMMON = {
    "seed": Param(int, 0, "master random seed"),
    "threads": Param(int, 1, "worker threads for per-sample / per-image work"),
    "verbose": Param(bool, False, "log progress to stderr"),
}

COMMANDS = {
    "make-dataset": {
        "input": Param(str, None, "directory of 8-bit binary PGM images", convert=_path),
        "output": Param(str, None, "output directory for crops and manifest.txt", convert=_path),
        "crop": Param(int, 64, "crop side in pixels"),
        "count": Param(int, 1, "crops per image"),
        "sigma": Param(float, 15.0, "noise standard deviation (intensity units)"),
    },
    "train": {
        "manifest": Param(str, None, "dataset manifest", convert=_path),
        "output": Param(str, None, "model JSON to write", convert=_path),
        "log": Param(str, None, "training log CSV (default: <output>.csv)", convert=_path),
        "mode": Param(str, ANALYSIS, "model family", choices=bilevel.MODES),
        "n": Param(int, 24, "number of filters / atoms"),
        "patch": Param(int, 5, "odd patch side"),
        "epsilon": Param(float, None, "penalty smoothing (default per penalty)"),
        "lam": Param(float, 1.0, "fidelity weight (analysis training requires 1)"),
        "iterations": Param(int, 100, "outer L-BFGS iterations"),
        "memory": Param(int, 10, "L-BFGS memory"),
        "outer_tol": Param(float, 1e-6, "outer l-inf gradient tolerance"),
        "initial_step": Param(float, 1.0, "length of the first outer step in theta space"),
        "solver_tol": Param(float, 1e-5, "lower-level l-inf gradient tolerance"),
        "init": Param(str, "random", "initial theta", choices=("random", "tv", "dct")),
        "init_norm": Param(float, 0.1, "l2 norm of each initial kernel"),
        "checkpoint_every": Param(int, 0, "write <output>.checkpoint.json every K iterations (0: off)"),
        "wall_clock": Param(bool, False, "record wall_seconds in the log (breaks byte-identical reruns)"),
    },
    "denoise": {
        "model": Param(str, None, "model JSON, or 'tv' for the built-in smoothed TV bank", convert=_path),
        "input": Param(str, None, "noisy image (.pgm or .npy), or clean image with --add-noise", convert=_path),
        "output": Param(str, None, "denoised PGM to write", convert=_path),
        "strength": Param(float, None, "prior strength s (default 1; for tv, proportional to --sigma)"),
        "lam": Param(float, None, "fidelity weight (default: the model's)"),
        "sigma": Param(float, 15.0, "noise level hint, only used for the tv default strength"),
        "reference": Param(str, None, "clean image; prints PSNR", convert=_path),
        "add_noise": Param(float, None, "treat input as clean, add noise of this sigma first"),
    },
    "eval": {
        "models": Param(list, None, "model JSONs and/or 'tv'", convert=_strs),
        "test_dir": Param(str, None, "directory of clean PGM test images", convert=_path),
        "sigmas": Param(list, [15.0, 25.0], "noise levels", convert=_floats),
        "output": Param(str, None, "results CSV", convert=_path),
        "strength": Param(float, None, "fixed strength for learned models (default 1)"),
        "tune_on": Param(str, None, "PGM used to tune each model's strength per sigma", convert=_path),
        "external": Param(str, None, "CSV of extra rows (image,sigma,model,psnr) to report alongside",
                          convert=_path),
    },
    "gradcheck": {
        "mode": Param(str, ANALYSIS, "model family", choices=bilevel.MODES),
        "tolerance": Param(float, None, "max relative error (default 1e-4 analysis, 1e-3 synthesis)"),
        "step": Param(float, None, "finite-difference step in kernel units"),
    },
    "export-filters": {
        "model": Param(str, None, "model JSON, or 'tv'", convert=_path),
        "output": Param(str, None, "output directory", convert=_path),
    },
}

REQUIRED = {
    "make-dataset": ("input", "output"),
    "train": ("manifest", "output"),
    "denoise": ("model", "input", "output"),
    "eval": ("models", "test_dir", "output"),
    "gradcheck": (),
    "export-filters": ("model", "output"),
}

GRADCHECK_TOLERANCE = {ANALYSIS: 1e-4, bilevel.SYNTHESIS: 1e-3}


def _coerce(name, param, value):
    """Type-check one value coming from JSON or argparse."""
    if value is None:
        return None
    kind = param.kind
    ok = {
        int: isinstance(value, int) and not isinstance(value, bool),
        float: isinstance(value, (int, float)) and not isinstance(value, bool),
        str: isinstance(value, str),
        bool: isinstance(value, bool),
        list: isinstance(value, (list, str)),
    }[kind]
    if not ok:
        raise UsageError(f"{name}: expected {kind.__name__}, got {value!r}")
    if param.convert is not None:
        try:
            value = param.convert(value)
        except (TypeError, ValueError) as exc:
            raise UsageError(f"{name}: {exc}") from None
    elif kind is float:
        value = float(value)
    if param.choices is not None and value not in param.choices:
        raise UsageError(f"{name}: {value!r} is not one of {', '.join(param.choices)}")
    return value


@dataclass
class RunConfig:
    """Fully resolved parameters of one command invocation."""

    command: str
    params: dict

    @staticmethod
    def schema(command):
        return {**COMMON, **COMMANDS[command]}

    @classmethod
    def resolve(cls, command, file_doc=None, flags=None):
        """Defaults, then the config document, then explicit flags."""
        schema = cls.schema(command)
        values = {k: p.default for k, p in schema.items()}
        if command == "gradcheck":
            values["seed"] = 7
        file_doc = file_doc or {}
        if not isinstance(file_doc, dict):
            raise UsageError("config file must hold a JSON object")
        known = set(COMMON) | set(COMMANDS) | {k for s in COMMANDS.values() for k in s}
        for key in file_doc:
            if key not in known:
                raise UsageError(f"config file: unknown key {key!r}")
        layered = {k: v for k, v in file_doc.items() if k in schema}
        section = file_doc.get(command, {})
        if not isinstance(section, dict):
            raise UsageError(f"config file: {command!r} must be an object")
        for key in section:
            if key not in schema:
                raise UsageError(f"config file: {command}.{key} is not a {command} parameter")
        layered.update(section)
        layered.update(flags or {})
        for key, value in layered.items():
            values[key] = _coerce(key, schema[key], value)
        cfg = cls(command, values)
        cfg.validate()
        return cfg

    def to_json(self):
        return json.dumps({self.command: self.params}, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text, command):
        return cls.resolve(command, json.loads(text))

    def validate(self):
        p = self.params
        missing = [k for k in REQUIRED[self.command] if p.get(k) in (None, [])]
        if missing:
            flags = ", ".join("--" + k.replace("_", "-") for k in missing)
            raise UsageError(f"{self.command}: missing required {flags}")
        if p["threads"] < 1:
            raise UsageError("--threads must be >= 1")
        getattr(self, "_validate_" + self.command.replace("-", "_"))(p)

    def _validate_make_dataset(self, p):
        if p["crop"] < 1 or p["count"] < 1:
            raise UsageError("--crop and --count must be positive")
        if not p["sigma"] > 0:
            raise UsageError("--sigma must be positive")

    def _validate_train(self, p):
        if p["patch"] < 3 or p["patch"] % 2 == 0:
            raise UsageError("--patch must be odd and >= 3")
        for key in ("n", "memory"):
            if p[key] < 1:
                raise UsageError(f"--{key} must be >= 1")
        if p["iterations"] < 0 or p["checkpoint_every"] < 0:
            raise UsageError("--iterations and --checkpoint-every must be >= 0")
        for key in ("outer_tol", "solver_tol", "initial_step", "init_norm", "lam"):
            if not p[key] > 0:
                raise UsageError(f"--{key.replace('_', '-')} must be positive")
        if p["epsilon"] is not None and not p["epsilon"] > 0:
            raise UsageError("--epsilon must be positive")
        if p["mode"] == ANALYSIS and p["lam"] != 1.0:
            raise UsageError("analysis training fixes --lam 1 (the scale is absorbed by the kernels)")
        if p["init"] == "tv" and p["n"] < 2:
            raise UsageError("--init tv needs --n >= 2")

    def _validate_denoise(self, p):
        if p["strength"] is not None and p["strength"] < 0:
            raise UsageError("--strength must be >= 0")
        if p["lam"] is not None and not p["lam"] > 0:
            raise UsageError("--lam must be positive")
        if p["add_noise"] is not None and not p["add_noise"] > 0:
            raise UsageError("--add-noise must be positive")
        if p["add_noise"] is not None and p["reference"] is not None:
            raise UsageError("--add-noise already makes the input the reference; drop --reference")
        if not p["sigma"] > 0:
            raise UsageError("--sigma must be positive")

    def _validate_eval(self, p):
        if not p["sigmas"] or any(not s > 0 for s in p["sigmas"]):
            raise UsageError("--sigmas must be positive")
        if p["strength"] is not None and p["strength"] < 0:
            raise UsageError("--strength must be >= 0")
        if p["strength"] is not None and p["tune_on"] is not None:
            raise UsageError("use either --strength or --tune-on, not both")

    def _validate_gradcheck(self, p):
        for key in ("tolerance", "step"):
            if p[key] is not None and not p[key] > 0:
                raise UsageError(f"--{key} must be positive")

    def _validate_export_filters(self, p):
        pass


# ---------------------------------------------------------------------------
# models


@dataclass(frozen=True)
class Model:
    """A denoiser ready to run: a bank plus how to solve with it."""

    name: str
    bank: FilterBank
    mode: str = ANALYSIS
    epsilon: float = None
    lam: float = 1.0
    builtin: bool = False

    @property
    def label(self):
        return TV_LABEL if self.builtin else self.name

    def default_strength(self, sigma):
        return TV_STRENGTH_PER_SIGMA * sigma if self.builtin else 1.0

    def denoise(self, f, strength=1.0, lam=None, cfg=DENOISE_CONFIG):
        """Minimiser with the prior weighted by ``strength``.

        Analysis kernels are multiplied by ``strength``; the synthesis
        model weights its coefficient penalty, which is the same as
        dividing lambda by ``strength``.  ``strength = 0`` returns ``f``.
        """
        lam = self.lam if lam is None else lam
        if strength == 0:
            return np.array(f, dtype=np.float64)
        if self.mode == ANALYSIS:
            penalty = pen.Penalty(pen.SMOOTHED_ABS, self.epsilon)
            return denoise_analysis(f, self.bank.scaled(strength), lam, penalty, cfg)
        return denoise_synthesis(f, self.bank, lam / strength, self.epsilon, cfg)


def tv_model():
    return Model("tv", FilterBank.from_kernels(bilevel.tv_kernels(3)), builtin=True)


def load_denoiser(spec):
    """``'tv'`` or a model JSON path."""
    if spec in TV_NAMES:
        return tv_model()
    path = Path(spec)
    try:
        doc = json.loads(path.read_text())
        bank, meta = bank_from_dict(doc)
    except OSError as exc:
        raise UsageError(f"cannot read model {spec}: {exc.strerror}") from None
    except (ValueError, KeyError, TypeError) as exc:
        raise UsageError(f"{spec} is not a valid model file: {exc}") from None
    mode = meta.get("mode", ANALYSIS)
    if mode not in bilevel.MODES:
        raise UsageError(f"{spec}: unknown mode {mode!r}")
    return Model(path.stem, bank, mode, meta.get("epsilon"), float(meta.get("lam", 1.0)))


def _check_fits(model, image, what):
    side = model.bank.patch_side
    if image.shape[0] < side or image.shape[1] < side:
        raise UsageError(f"{what} is {image.shape[1]}x{image.shape[0]}, smaller than the "
                         f"model's {side}x{side} patch")


def _read_image(path, what="image"):
    try:
        return load_image(path)
    except OSError as exc:
        raise UsageError(f"cannot read {what} {path}: {exc.strerror or exc}") from None
    except (PgmError, ImageError, ValueError) as exc:
        raise UsageError(f"cannot read {what} {path}: {exc}") from None


def _list_pgms(directory):
    d = Path(directory)
    if not d.is_dir():
        raise UsageError(f"{directory} is not a directory")
    files = sorted(p for p in d.iterdir() if p.suffix.lower() == ".pgm" and p.is_file())
    if not files:
        raise NoInputs(f"no .pgm files in {directory}")
    return files


def noise_seed(master, image_name, sigma):
    """Per-(image, sigma) noise seed shared by every evaluated model."""
    return derive_seed(master, zlib.crc32(image_name.encode()), round(sigma * 1000))


# ---------------------------------------------------------------------------
# commands


def cmd_make_dataset(p):
    images, kept = [], []
    for path in _list_pgms(p["input"]):
        img = _read_image(path)
        if img.shape[0] < p["crop"] or img.shape[1] < p["crop"]:
            log.warning("skipping %s: %dx%d is smaller than crop %d", path.name, img.shape[1],
                        img.shape[0], p["crop"])
            continue
        images.append(img)
        kept.append(path.name)
    if not images:
        raise NoInputs(f"no image in {p['input']} is at least {p['crop']}x{p['crop']}")
    samples = make_dataset(images, p["crop"], p["count"], p["sigma"], p["seed"])
    out = Path(p["output"])
    out.mkdir(parents=True, exist_ok=True)
    pairs = []
    for s in samples:
        clean, noisy = f"clean_{s.id:05d}.pgm", f"noisy_{s.id:05d}.npy"
        save_pgm(s.clean, out / clean)
        save_npy(s.noisy, out / noisy)
        pairs.append((clean, noisy))
    write_manifest(pairs, out / "manifest.txt")
    print(f"seed {p['seed']}: wrote {len(samples)} sample pairs from {len(kept)} images "
          f"to {out / 'manifest.txt'}")
    return EXIT_OK


def _log_csv(state, initial_loss, initial_grad, wall_clock):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iteration", "loss", "grad_norm", "wall_seconds"])
    rows = [(0, initial_loss, initial_grad, 0.0)]
    rows += list(zip(range(1, state.iteration + 1), state.loss_history, state.grad_norm_history,
                     state.wall_seconds))
    for it, f, g, t in rows:
        if f is None:
            continue
        w.writerow([it, repr(float(f)), repr(float(g)), f"{t:.3f}" if wall_clock else ""])
    return buf.getvalue()


def cmd_train(p):
    try:
        samples = load_samples(p["manifest"])
    except OSError as exc:
        raise UsageError(f"cannot read dataset: {exc}") from None
    except (PgmError, ImageError, ValueError) as exc:
        raise UsageError(f"bad dataset: {exc}") from None
    if not samples:
        raise NoInputs(f"{p['manifest']} lists no samples")
    for s in samples:
        if min(s.clean.shape) < p["patch"]:
            raise UsageError(f"sample {s.id} is smaller than the {p['patch']}x{p['patch']} patch")
    mode = p["mode"]
    kind = pen.SMOOTHED_ABS if mode == ANALYSIS else pen.SMOOTHED_INTERVAL
    penalty = pen.Penalty(kind, p["epsilon"])
    spec = bilevel.ModelSpec(mode, p["patch"], penalty, p["lam"])
    basis = dct_mean_zero_basis(p["patch"])
    scale = 1.0 if mode == ANALYSIS else 1.0 / basis.m
    warm = None if p["init"] == "random" else p["init"]
    theta0 = bilevel.init_theta(p["n"], basis, p["seed"], p["init_norm"], scale, warm)
    outer = bilevel.OuterConfig(
        optimizer=lbfgs.LbfgsConfig(memory=p["memory"], max_iter=p["iterations"],
                                    grad_tol=p["outer_tol"], initial_step_norm=p["initial_step"]),
        solver=SolverConfig(
            grad_tol=p["solver_tol"], cg_tol=1e-8, newton_max_iter=200, cg_max_iter=5000),
        threads=p["threads"])
    out = Path(p["output"])
    log_path = Path(p["log"]) if p["log"] else out.with_suffix(".csv")
    ckpt_path = out.with_suffix(".checkpoint.json")
    meta = {"mode": mode, "penalty": kind, "epsilon": penalty.epsilon, "lam": p["lam"],
            "seed": p["seed"], "samples": len(samples)}

    def save(path, theta, iteration, **extra):
        bank = spec.bank(basis, theta)
        save_model(path, bank, **meta, iterations=iteration, **extra)

    def on_step(state):
        k = p["checkpoint_every"]
        if k and state.iteration % k == 0:
            save(ckpt_path, state.theta, state.iteration)

    log.info("training %s model: %d filters of %dx%d on %d samples", mode, p["n"], p["patch"],
             p["patch"], len(samples))
    try:
        state = bilevel.train(samples, theta0, spec, basis, outer, callback=on_step)
    except bilevel.TrainingError as exc:
        st = exc.state
        if st.iteration > 0:
            save(ckpt_path, st.theta, st.iteration, status="failed")
            atomic_write(log_path, _log_csv(st, None, None, p["wall_clock"]))
            print(f"error: {exc}; last good theta saved to {ckpt_path}", file=sys.stderr)
        else:
            print(f"error: {exc}", file=sys.stderr)
        return EXIT_COMPUTE
    save(out, state.theta, state.iteration, status=state.status,
         final_loss=state.loss_history[-1] if state.loss_history else state.initial_loss)
    atomic_write(log_path, _log_csv(state, state.initial_loss, state.initial_grad_norm,
                                    p["wall_clock"]))
    final = state.loss_history[-1] if state.loss_history else state.initial_loss
    print(f"seed {p['seed']}: {state.iteration} iterations ({state.status}), loss "
          f"{state.initial_loss:.6g} -> {final:.6g}; model {out}, log {log_path}")
    return EXIT_OK


def cmd_denoise(p):
    model = load_denoiser(p["model"])
    image = _read_image(p["input"], "input")
    _check_fits(model, image, "input")
    reference = None
    if p["add_noise"] is not None:
        reference = image
        image = add_gaussian_noise(reference, p["add_noise"], p["seed"])
    elif p["reference"] is not None:
        reference = _read_image(p["reference"], "reference")
        if reference.shape != image.shape:
            raise UsageError("reference and input sizes differ")
    sigma = p["add_noise"] if p["add_noise"] is not None else p["sigma"]
    strength = p["strength"] if p["strength"] is not None else model.default_strength(sigma)
    u = model.denoise(image, strength, p["lam"])
    save_pgm(u, p["output"])
    print(f"{model.label}: strength {strength:g}, wrote {p['output']}")
    if model.builtin:
        print(f"note: {TV_LABEL} is smoothed TV solved by this package's Newton solver, "
              "an approximation of ROF")
    if reference is not None:
        print(f"psnr noisy {_fmt_psnr(image, reference)} dB, denoised {_fmt_psnr(u, reference)} dB")
    return EXIT_OK


def _fmt_psnr(a, b):
    try:
        return f"{psnr(a, b):.4f}"
    except ValueError:
        return "inf"


def _read_external(path):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror}") from None
    rows = []
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None or not {"image", "sigma", "model", "psnr"} <= set(reader.fieldnames):
        raise UsageError(f"{path}: need header image,sigma,model,psnr")
    for r in reader:
        try:
            rows.append((r["image"], float(r["sigma"]), r["model"], float(r["psnr"])))
        except (TypeError, ValueError):
            raise UsageError(f"{path}: bad row {r}") from None
    return rows


def cmd_eval(p):
    models = [load_denoiser(m) for m in p["models"]]
    labels = [m.label for m in models]
    if len(set(labels)) != len(labels):
        raise UsageError(f"model names must be distinct, got {labels}")
    files = _list_pgms(p["test_dir"])
    tune_path = Path(p["tune_on"]).resolve() if p["tune_on"] else None
    files = [f for f in files if f.resolve() != tune_path]
    if not files:
        raise NoInputs(f"no test images left in {p['test_dir']}")
    tests = [(f.name, _read_image(f)) for f in files]
    for m in models:
        for name, img in tests:
            _check_fits(m, img, name)
    external = _read_external(p["external"]) if p["external"] else []

    strengths = {}
    for m in models:
        for sigma in p["sigmas"]:
            if tune_path is not None:
                clean = _read_image(tune_path, "tuning image")
                noisy = add_gaussian_noise(clean, sigma, noise_seed(p["seed"], tune_path.name, sigma))
                guess = m.default_strength(sigma)
                s, _ = tune_strength(noisy, clean, lambda f, s, m=m: m.denoise(f, s),
                                     lo=guess / 10, hi=guess * 10)
            elif p["strength"] is not None and not m.builtin:
                s = p["strength"]
            else:
                s = m.default_strength(sigma)
            strengths[m.label, sigma] = s
            log.info("%s sigma %g: strength %.4g", m.label, sigma, s)

    def run(job):
        name, clean = job
        out = []
        for sigma in p["sigmas"]:
            noisy = add_gaussian_noise(clean, sigma, noise_seed(p["seed"], name, sigma))
            for m in models:
                try:
                    value = psnr(m.denoise(noisy, strengths[m.label, sigma]), clean)
                except (ConvergenceError, FloatingPointError, ValueError) as exc:
                    log.warning("%s sigma %g %s failed: %s", name, sigma, m.label, exc)
                    value = None
                out.append((name, sigma, m.label, value))
        return out

    if p["threads"] > 1:
        with ThreadPoolExecutor(p["threads"]) as pool:
            parts = list(pool.map(run, tests))
    else:
        parts = [run(t) for t in tests]
    rows = [r for part in parts for r in part] + external

    summary = {}
    for name, sigma, label, value in rows:
        if value is not None:
            summary.setdefault((label, sigma), []).append(value)
    failures = sum(1 for r in rows if r[3] is None)

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["image", "sigma", "model", "psnr"])
    for name, sigma, label, value in rows:
        w.writerow([name, f"{sigma:g}", label, "" if value is None else f"{value:.4f}"])
    for (label, sigma), vals in summary.items():
        w.writerow(["average", f"{sigma:g}", label, f"{np.mean(vals):.4f}"])
    atomic_write(p["output"], buf.getvalue())

    print(f"{'model':<24}{'sigma':>7}{'images':>8}{'psnr':>10}")
    for (label, sigma), vals in summary.items():
        print(f"{label:<24}{sigma:>7g}{len(vals):>8}{np.mean(vals):>10.4f}")
    if any(m.builtin for m in models):
        print(f"note: {TV_LABEL} is smoothed TV solved by this package's Newton solver, "
              "an approximation of ROF")
    print(f"wrote {p['output']}")
    if failures:
        print(f"error: {failures} denoising runs failed (empty psnr cells)", file=sys.stderr)
        return EXIT_COMPUTE
    return EXIT_OK


def cmd_gradcheck(p):
    spec, basis, theta, sample = bilevel.canonical_instance(p["mode"], p["seed"])
    report = bilevel.gradient_check(spec, basis, theta, sample, h=p["step"])
    tol = p["tolerance"] if p["tolerance"] is not None else GRADCHECK_TOLERANCE[p["mode"]]
    if log.isEnabledFor(logging.INFO):
        for entry in np.ndindex(*theta.shape):
            log.info("theta%s implicit % .10e  fd % .10e  rel %.2e", entry, report.implicit[entry],
                     report.finite_difference[entry], report.rel_err[entry])
    ok = report.max_rel_err < tol
    print(f"gradcheck {p['mode']} (seed {p['seed']}, {theta.size} entries, h {report.h:g}): "
          f"max relative error {report.max_rel_err:.3e}, tolerance {tol:g}: {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_INVALID


def filter_tile(kernel):
    """Kernel mapped to 8 bits as ``128 + 127 k / max|k|``; zero kernels come out mid-grey."""
    peak = float(np.max(np.abs(kernel)))
    if peak == 0:
        return np.full(kernel.shape, 128.0)
    return 128.0 + 127.0 * kernel / peak


def cmd_export_filters(p):
    model = load_denoiser(p["model"])
    out = Path(p["output"])
    try:
        out.mkdir(parents=True, exist_ok=True)
        for i, k in enumerate(model.bank.kernels):
            save_pgm(filter_tile(k), out / f"filter_{i:03d}.pgm")
        atomic_write(out / "filters.txt", format_kernels(model.bank))
    except OSError as exc:
        raise UsageError(f"cannot write to {out}: {exc.strerror or exc}") from None
    print(f"wrote {model.bank.n} tiles of {model.bank.patch_side}x{model.bank.patch_side} "
          f"and filters.txt to {out}")
    return EXIT_OK


HANDLERS = {
    "make-dataset": cmd_make_dataset,
    "train": cmd_train,
    "denoise": cmd_denoise,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "export-filters": cmd_export_filters,
}

DESCRIPTIONS = {
    "make-dataset": "cut random noisy/clean training crops from a directory of PGMs",
    "train": "learn an analysis operator or synthesis dictionary",
    "denoise": "denoise one image with a model",
    "eval": "PSNR of several models over a test directory and noise levels",
    "gradcheck": "implicit gradient vs finite differences on a fixed 6x6 instance",
    "export-filters": "write each kernel as a small PGM plus a text dump",
}


# ---------------------------------------------------------------------------
# argument parsing


def _add_flag(parser, name, param):
    flag = "--" + name.replace("_", "-")
    kw = {"dest": name, "default": argparse.SUPPRESS, "help": param.help}
    if param.kind is bool:
        parser.add_argument(flag, action="store_true", **kw)
    elif param.kind is list:
        parser.add_argument(flag, nargs="+", metavar=name.upper(), **kw)
    else:
        parser.add_argument(flag, type=param.kind, choices=param.choices, **kw)


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="JSON config file")
    for name, param in COMMON.items():
        _add_flag(common, name, param)
    parser = argparse.ArgumentParser(prog="sparseprior", description=__doc__.splitlines()[0],
                                     parents=[common])
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for command, schema in COMMANDS.items():
        sp = sub.add_parser(command, parents=[common], help=DESCRIPTIONS[command],
                            description=DESCRIPTIONS[command])
        for name, param in schema.items():
            _add_flag(sp, name, param)
    return parser


def parse(argv=None):
    """Parse ``argv`` into a validated :class:`RunConfig`."""
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        raise UsageError("invalid command line") if exc.code else exc
    flags = vars(ns)
    command = flags.pop("command")
    config_path = flags.pop("config", None)
    doc = None
    if config_path is not None:
        try:
            doc = json.loads(Path(config_path).read_text())
        except OSError as exc:
            raise UsageError(f"cannot read config {config_path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {config_path} is not valid JSON: {exc}") from None
    return RunConfig.resolve(command, doc, flags)


def main(argv=None):
    try:
        cfg = parse(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help
        return exc.code or EXIT_OK
    logging.basicConfig(level=logging.INFO if cfg.params["verbose"] else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return HANDLERS[cfg.command](cfg.params)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (ConvergenceError, lbfgs.NonFiniteError, FloatingPointError, bilevel.SampleError) as exc:
        print(f"error: computation failed: {exc}", file=sys.stderr)
        return EXIT_COMPUTE


if __name__ == "__main__":
    sys.exit(main())
