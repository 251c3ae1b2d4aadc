"""Experiment drivers behind the command-line interface.

Each ``cmd_*`` function takes a validated :class:`ExperimentConfig` and an
output directory, writes its artifacts, and returns a summary dict. The
figure helpers (:func:`density_panel`, :func:`accuracy_curve`) are also used
directly by the acceptance tests.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import montecarlo as mc
from .bayes import (
    FactorizedVertex,
    classify,
    correction_matrix_A,
    corrected_posterior_mean,
    kernel_blocks,
    one_hot,
)
from .config import ConfigError, ExperimentConfig
from .core import Activation, Dataset, NetworkConfig
from .density import (
    OutputPotential,
    bin_densities,
    build_potential,
    default_grid,
    density_moments,
    marginal_density,
)
from .flow import FlowTrace, kernel_flow, run_flow
from .mnist import load_mnist, read_images, read_labels, subsample_indices

DENSITY_FLOOR = 1e-3  # on the standardized scale y / sqrt(K)


def bundled_mnist_dir() -> Path:
    return Path(__file__).resolve().parents[2] / "data" / "mnist5k"


# ---------------------------------------------------------------------------
# output helpers


def write_csv(path: Path, header, columns) -> None:
    cols = [np.asarray(c) for c in columns]
    lines = [",".join(header)]
    for row in zip(*cols):
        lines.append(",".join(_fmt(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def _fmt(v) -> str:
    if isinstance(v, (str, np.str_)):
        return str(v)
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.17g}"


def write_json(path: Path, obj) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


# ---------------------------------------------------------------------------
# configuration pieces


def network_from_config(cfg: ExperimentConfig, n0: int, width: int | None = None) -> NetworkConfig:
    net = cfg.section("network")
    act = Activation.from_json(net["activation"])
    if width is not None:
        n_out = net.get("n_out", 1)
        widths = (n0, width, 2 * width, n_out) if net.get("shape", "deep") == "deep" else (n0, width, n_out)
    elif "widths" in net:
        widths = tuple(net["widths"])
        if widths[0] != n0:
            raise ConfigError(f"network widths start with {widths[0]} but inputs have dimension {n0}")
    else:
        raise ConfigError("network needs 'widths' (or a 'width_sweep' for fig1)")
    return NetworkConfig(widths, net.get("bias_var", 0.0), net.get("weight_var", 1.0), act)


def _mnist_paths(ds: dict, cfg: ExperimentConfig, split: str):
    key_i, key_l = ("images", "labels") if split == "train" else ("test_images", "test_labels")
    if key_i in ds:
        return cfg.resolve(ds[key_i]), cfg.resolve(ds[key_l])
    base = bundled_mnist_dir()
    img, lab = base / f"{split}-images-idx3-ubyte.gz", base / f"{split}-labels-idx1-ubyte.gz"
    if not img.exists():
        raise ConfigError(f"dataset.{key_i} not given and no bundled MNIST subset at {base}")
    return img, lab


def dataset_from_config(cfg: ExperimentConfig, n_out: int = 1, seed: int | None = None) -> Dataset:
    ds = cfg.section("dataset")
    seed = ds.get("seed", 0) if seed is None else seed
    src = ds["source"]
    if src == "inline":
        x = np.asarray(ds["inputs"], dtype=np.float64)
        nr = ds.get("train_count", x.shape[0])
        ne = ds.get("test_count", x.shape[0] - nr)
        y = ds.get("targets")
        lab = ds.get("labels_inline")
        return Dataset(x, nr, ne, None if y is None else np.asarray(y), lab)
    if src == "synthetic":
        count = ds.get("count", 1)
        dim = ds.get("input_dim", 1)
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((count, dim))
        nr = ds.get("train_count", count)
        y = rng.standard_normal((nr, n_out)) if nr else None
        return Dataset(x, nr, count - nr, y)
    # mnist
    img, lab = _mnist_paths(ds, cfg, "train")
    if "index" in ds:
        return load_mnist(img, lab, indices=[ds["index"]])
    nr = ds.get("train_count", ds.get("count", 1))
    train = load_mnist(img, lab, nr, seed)
    ne = ds.get("test_count", 0)
    if ne == 0:
        targets = one_hot(train.labels, n_out) if n_out == 10 else None
        return Dataset(train.inputs, targets=targets, labels=train.labels)
    timg, tlab = _mnist_paths(ds, cfg, "test")
    test = load_mnist(timg, tlab, ne, seed)
    targets = one_hot(train.labels, n_out) if n_out == 10 else None
    return Dataset(np.vstack([train.inputs, test.inputs]), nr, test.inputs.shape[0], targets,
                   np.concatenate([train.labels, test.labels]))


def _run(cfg: ExperimentConfig) -> dict:
    return cfg.section("run")


# ---------------------------------------------------------------------------
# commands


def cmd_flow(cfg: ExperimentConfig, out: Path) -> dict:
    run = _run(cfg)
    net0 = cfg.section("network")
    ds = dataset_from_config(cfg, net0.get("widths", [0, 1])[-1])
    net = network_from_config(cfg, ds.input_dim)
    trace = run_flow(ds, net, run.get("backend", "quad"), run.get("jitter", 0.0), run.get("order"))
    path = out / "flow.json"
    path.write_text(trace.dumps() + "\n")
    return {"files": [path.name], "layers": net.depth}


def _density_outputs(potential: OutputPotential, run: dict, out: Path, tag: str = "") -> dict:
    grid_cfg = run.get("grid", {})
    modes = ["exp", "lin"] if run.get("mode", "exp") == "both" else [run.get("mode", "exp")]
    files, moments = [], {}
    for mode in modes:
        grid = default_grid(potential, grid_cfg.get("points", 2001), grid_cfg.get("half_width_sd", 6.0), mode)
        y, p = marginal_density(potential, grid, mode)
        name = f"density{tag}_{mode}.csv"
        write_csv(out / name, ["y", "p"], [y, p])
        files.append(name)
        moments[mode] = density_moments(y, p)
    return {"files": files, "moments": moments}


def cmd_density(cfg: ExperimentConfig, out: Path) -> dict:
    run = _run(cfg)
    ds = dataset_from_config(cfg, 1)
    net = network_from_config(cfg, ds.input_dim)
    trace = run_flow(ds, net, run.get("backend", "quad"), run.get("jitter", 0.0), run.get("order"))
    pot = build_potential(trace, run.get("jitter", 0.0))
    if "epsilon" in run:
        pot = pot.with_epsilon(run["epsilon"])
    res = _density_outputs(pot, run, out)
    res["epsilon"] = pot.epsilon
    write_json(out / "density_summary.json", res)
    res["files"].append("density_summary.json")
    return res


def predicted_connected4(trace: FlowTrace, cols, n_out: int) -> float:
    """eps * (V_(12)(34) d12 d34 + V_(13)(24) d13 d24 + V_(14)(23) d14 d23)
    for sample-matrix columns a * n_L + i."""
    from .core import pair_lookup
    D = trace.last.size
    lk = pair_lookup(D)
    V = trace.last.vertex
    a = [c // n_out for c in cols]
    i = [c % n_out for c in cols]
    tot = 0.0
    for (p, q), (r, s) in (((0, 1), (2, 3)), ((0, 2), (1, 3)), ((0, 3), (1, 2))):
        if i[p] == i[q] and i[r] == i[s]:
            tot += V[lk[a[p], a[q]], lk[a[r], a[s]]]
    return trace.epsilon * tot


def cmd_mc(cfg: ExperimentConfig, out: Path, seed: int | None = None) -> dict:
    run = _run(cfg)
    net0 = cfg.section("network")
    ds = dataset_from_config(cfg, net0.get("widths", [0, 1])[-1])
    net = network_from_config(cfg, ds.input_dim)
    n = run.get("mc_samples", 100_000)
    mseed = run.get("mc_seed", 0) if seed is None else seed
    samples = mc.sample_outputs(ds, net, n, mseed, run.get("mc_method", "gram"))
    ch = run.get("channel", 0)
    hist = mc.histogram(samples, ch, run.get("bins", 101), run.get("half_width_sd", 5.0))
    write_csv(out / "histogram.csv", ["bin_center", "density", "stderr"],
              [hist.centers, hist.density, hist.std_error])
    files = ["histogram.csv"]
    trace = run_flow(ds, net, run.get("backend", "quad"), run.get("jitter", 0.0), run.get("order"))
    nL = net.n_out
    cols = samples.shape[1]
    rows = {"estimator": [], "columns": [], "value": [], "stderr": [], "theory": []}
    K, S = trace.last.kernel, trace.last.self_energy
    for c1 in range(cols):
        for c2 in range(c1, cols):
            e = mc.estimate_moment2(samples, (c1, c2))
            same = c1 % nL == c2 % nL
            th = (K[c1 // nL, c2 // nL] + trace.epsilon * S[c1 // nL, c2 // nL]) if same else 0.0
            _add_row(rows, e, f"{c1} {c2}", th)
    for c in range(cols):
        e = mc.estimate_cumulant4(samples, c)
        _add_row(rows, e, f"{c} {c} {c} {c}", predicted_connected4(trace, (c,) * 4, nL))
    if cols >= 2:
        e = mc.estimate_connected4(samples, (0, 0, 1, 1))
        _add_row(rows, e, "0 0 1 1", predicted_connected4(trace, (0, 0, 1, 1), nL))
    write_csv(out / "cumulants.csv", list(rows), list(rows.values()))
    files.append("cumulants.csv")
    if run.get("dump_samples"):
        mc.write_samples(out / "samples.bin", samples)
        files.append("samples.bin")
    return {"files": files, "n_samples": n, "seed": mseed}


def _add_row(rows, est, cols, theory):
    rows["estimator"].append(est.estimator)
    rows["columns"].append(cols)
    rows["value"].append(est.value)
    rows["stderr"].append(est.std_error)
    rows["theory"].append(theory)


def posterior_for(ds: Dataset, net: NetworkConfig, backend="quad", jitter=None, order=None,
                  epsilon: float | None = None):
    """Corrected posterior for a dataset whose first rows are training points.

    Two-layer polynomial networks on large datasets use the factorized
    vertex; otherwise the full flow is run.
    """
    nr = ds.train_count
    D = ds.size
    n_out = net.n_out
    eps = net.epsilon if epsilon is None else epsilon
    if net.depth == 2 and net.activation.polynomial_coeffs is not None and D > 24:
        Ks = kernel_flow(ds, net)
        blocks = kernel_blocks(Ks[-1], nr, jitter)
        vertex = FactorizedVertex.second_layer(Ks[0], net.activation, net.weight_vars[1])
        S = np.zeros((D, nr))
    else:
        trace = run_flow(ds, net, backend, jitter or 0.0, order)
        blocks = kernel_blocks(trace.last.kernel, nr, jitter)
        vertex = trace.last.vertex
        S = trace.last.self_energy
    A = correction_matrix_A(S, vertex, blocks, ds.targets, n_out)
    return corrected_posterior_mean(blocks, ds.targets, A, eps)


def cmd_infer(cfg: ExperimentConfig, out: Path, seed: int | None = None) -> dict:
    run = _run(cfg)
    net0 = cfg.section("network")
    n_out = net0.get("widths", [0, 10])[-1]
    ds = dataset_from_config(cfg, n_out, seed)
    if ds.targets is None or ds.test_count == 0:
        raise ConfigError("inference needs training targets and at least one test input")
    net = network_from_config(cfg, ds.input_dim)
    res = posterior_for(ds, net, run.get("backend", "quad"), run.get("jitter"), run.get("order"),
                        run.get("epsilon"))
    summary = res.to_json()
    if ds.labels is not None:
        test_labels = ds.labels[ds.train_count:]
        summary["accuracy"] = {"gp": classify(res.gp_mean, test_labels),
                               "corrected": classify(res, test_labels)}
    write_json(out / "posterior.json", summary)
    return {"files": ["posterior.json"], "accuracy": summary.get("accuracy")}


# ---------------------------------------------------------------------------
# figure 1: output density against sampled networks


@dataclass
class DensityPanel:
    width: int | None
    potential: OutputPotential
    histogram: mc.Histogram
    theory: dict = field(default_factory=dict)      # mode -> per-bin density
    fraction: dict = field(default_factory=dict)    # mode -> agreement fraction
    curves: dict = field(default_factory=dict)      # mode -> (y, p)

    @property
    def kernel(self) -> float:
        return float(self.potential.kernel[0, 0])


def agreement_fraction(hist: mc.Histogram, theory: np.ndarray, kernel: float, nsigma: float = 3.0) -> float:
    """Share of bins (standardized density above the floor) within nsigma."""
    mask = hist.density * np.sqrt(kernel) > DENSITY_FLOOR
    dev = np.abs(hist.density - theory)
    ok = dev <= nsigma * hist.std_error
    return float(np.mean(ok[mask]))


def density_panel(x: np.ndarray, cfg_net: dict, width: int | None, n_samples: int, seed: int,
                  bins: int = 101, half_width_sd: float = 5.0, grid_points: int = 2001,
                  backend: str = "quad") -> DensityPanel:
    """Theory curves and a sampled histogram for one width of the sweep.

    ``width=None`` is the infinite-width limit: Gaussian theory and exact
    Gaussian samples with the same kernel.
    """
    cfg = ExperimentConfig({"network": cfg_net, "dataset": {"source": "inline", "inputs": x.tolist()}})
    ds = Dataset(x)
    net = network_from_config(cfg, ds.input_dim, width if width is not None else 1)
    if width is None:
        net = NetworkConfig(net.widths, net.bias_vars, net.weight_vars, net.activation)
    trace = run_flow(ds, net, backend)
    pot = build_potential(trace)
    if width is None:
        pot = pot.with_epsilon(0.0)
        samples = mc.sample_gaussian(pot.kernel, 1, n_samples, seed)
    else:
        samples = mc.sample_outputs(ds, net, n_samples, seed)
    hist = mc.histogram(samples, 0, bins, half_width_sd)
    panel = DensityPanel(width, pot, hist)
    for mode in ("exp", "lin"):
        panel.theory[mode] = bin_densities(pot, hist.edges, mode)
        panel.fraction[mode] = agreement_fraction(hist, panel.theory[mode], panel.kernel)
        panel.curves[mode] = marginal_density(pot, default_grid(pot, grid_points, mode=mode), mode)
    return panel


def select_mode(panels) -> str:
    """Mode with the higher mean agreement over the finite-width panels."""
    finite = [p for p in panels if p.width is not None] or list(panels)
    score = {m: np.mean([p.fraction[m] for p in finite]) for m in ("exp", "lin")}
    return "lin" if score["lin"] > score["exp"] else "exp"


def cmd_fig1(cfg: ExperimentConfig, out: Path, seed: int | None = None) -> dict:
    run = _run(cfg)
    net = cfg.section("network")
    if "width_sweep" not in net:
        raise ConfigError("fig1 needs network.width_sweep")
    ds_cfg = dict(cfg.section("dataset"))
    if ds_cfg.get("source") == "mnist" and "index" not in ds_cfg and "count" not in ds_cfg:
        ds_cfg["index"] = 0
    ds = dataset_from_config(ExperimentConfig({"network": net, "dataset": ds_cfg}, cfg.base_dir), 1)
    if ds.size != 1:
        raise ConfigError("fig1 uses a single input")
    mseed = run.get("mc_seed", 0) if seed is None else seed
    panels = []
    for k, width in enumerate(net["width_sweep"]):
        panels.append(density_panel(ds.inputs, net, width, run.get("mc_samples", 1_000_000), mseed + k,
                                    run.get("bins", 101), run.get("half_width_sd", 5.0),
                                    run.get("grid", {}).get("points", 2001), run.get("backend", "quad")))
    mode = select_mode(panels)
    files, summary = [], {"selected_mode": mode, "seed": mseed, "panels": []}
    for p in panels:
        tag = "inf" if p.width is None else str(p.width)
        for m, (y, dens) in p.curves.items():
            name = f"density_n{tag}_{m}.csv"
            write_csv(out / name, ["y", "p"], [y, dens])
            files.append(name)
        name = f"histogram_n{tag}.csv"
        write_csv(out / name, ["bin_center", "density", "stderr", "theory_exp", "theory_lin"],
                  [p.histogram.centers, p.histogram.density, p.histogram.std_error,
                   p.theory["exp"], p.theory["lin"]])
        files.append(name)
        summary["panels"].append({"width": p.width, "epsilon": p.potential.epsilon,
                                  "kernel": p.kernel, "agreement": p.fraction,
                                  "moments_lin": density_moments(*p.curves["lin"])})
    write_json(out / "fig1_summary.json", summary)
    files.append("fig1_summary.json")
    return {"files": files, "selected_mode": mode}


# ---------------------------------------------------------------------------
# figure 2: accuracy against inverse width


@dataclass
class AccuracyCurve:
    train_count: int
    epsilons: np.ndarray
    accuracy: np.ndarray      # (seeds, epsilons)
    results: list             # PosteriorResult per seed when kept

    @property
    def mean(self):
        return self.accuracy.mean(axis=0)

    @property
    def stderr(self):
        s = self.accuracy.shape[0]
        return self.accuracy.std(axis=0, ddof=1) / np.sqrt(s) if s > 1 else np.zeros(self.accuracy.shape[1])


def accuracy_curve(train_x, train_y, test_x, test_y, activation: Activation, bias_var: float,
                   weight_var: float, train_count: int, epsilons, seeds, n_classes: int = 10,
                   keep_results: bool = False) -> AccuracyCurve:
    """Test accuracy of the corrected posterior mean for a two-layer network,
    one row per training subsample seed."""
    eps = np.asarray(epsilons, dtype=np.float64)
    acc = np.zeros((len(seeds), eps.size))
    kept = []
    for r, s in enumerate(seeds):
        idx = subsample_indices(train_x.shape[0], train_count, s)
        x = np.vstack([train_x[idx], test_x])
        y = one_hot(train_y[idx], n_classes)
        ds = Dataset(x, train_count, test_x.shape[0], y)
        net = NetworkConfig((x.shape[1], 1, n_classes), bias_var, weight_var, activation)
        res = posterior_for(ds, net, jitter=None, epsilon=0.0)
        for c, e in enumerate(eps):
            acc[r, c] = classify(res.with_epsilon(e), test_y)
        if keep_results:
            kept.append(res)
    return AccuracyCurve(train_count, eps, acc, kept)


def cmd_fig2(cfg: ExperimentConfig, out: Path, seed: int | None = None) -> dict:
    run = _run(cfg)
    net = cfg.section("network")
    act = Activation.from_json(net["activation"])
    ds = cfg.section("dataset")
    if ds.get("source") != "mnist":
        raise ConfigError("fig2 runs on MNIST")
    img, lab = _mnist_paths(ds, cfg, "train")
    timg, tlab = _mnist_paths(ds, cfg, "test")
    train_x = read_images(img).reshape(-1, 784).astype(np.float64)
    train_y = read_labels(lab).astype(np.int64)
    test_x = read_images(timg).reshape(-1, 784).astype(np.float64)
    test_y = read_labels(tlab).astype(np.int64)
    ne = run.get("test_count", 1000)
    base_seed = ds.get("seed", 0) if seed is None else seed
    if ne < test_x.shape[0]:
        sel = subsample_indices(test_x.shape[0], ne, base_seed)
        test_x, test_y = test_x[sel], test_y[sel]
    eps = run.get("epsilon_sweep", [0.0, 0.001, 0.002, 0.005, 0.01])
    seeds = [base_seed + k for k in range(run.get("seeds", 10))]
    bias = net.get("bias_var", 0.0)
    weight = net.get("weight_var", 1.0 / 3.0)
    bias = bias if np.ndim(bias) == 0 else bias[1]
    weight = weight if np.ndim(weight) == 0 else weight[1]
    files, summary = [], {"test_count": int(test_x.shape[0]), "seeds": seeds, "curves": []}
    for nr in run.get("train_counts", [100, 300]):
        curve = accuracy_curve(train_x, train_y, test_x, test_y, act, bias, weight, nr, eps, seeds)
        name = f"accuracy_NR{nr}.csv"
        write_csv(out / name, ["epsilon", "accuracy", "stderr"], [curve.epsilons, curve.mean, curve.stderr])
        files.append(name)
        summary["curves"].append({"train_count": nr, "epsilon": curve.epsilons.tolist(),
                                  "accuracy_per_seed": curve.accuracy.tolist()})
    write_json(out / "fig2_summary.json", summary)
    files.append("fig2_summary.json")
    return {"files": files}


COMMANDS = {
    "flow": cmd_flow,
    "density": cmd_density,
    "mc": cmd_mc,
    "infer": cmd_infer,
    "fig1": cmd_fig1,
    "fig2": cmd_fig2,
}
