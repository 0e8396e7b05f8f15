"""Self-check suites behind ``ncsr verify``: round trips, Jacobian and
gradient oracles, metric cross-checks, determinism.

Every check returns a :class:`CheckResult` with the measured error and
its tolerance so failures are diagnosable from the CLI output alone.
The quick level covers layer/model round trips, log-determinant
exactness at toy sizes, metric oracles and determinism; the full level
adds the brute-force full-Jacobian likelihood check and the
finite-difference gradient sweep over every parameter class.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import flow_layers as fl
from . import tensor as T
from .linalg import SquareMatrix, logdet_and_inverse
from .metrics import SampleSet, diversity_score, lr_psnr, psnr
from .model import ModelConfig, NCSRModel, apply_structured_init
from .resample import bicubic_resize
from .rng import Rng
from .tensor import Tensor, no_grad


@dataclass
class CheckResult:
    name: str
    passed: bool
    measured: float
    tolerance: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f"  ({self.detail})" if self.detail else ""
        return f"[{status}] {self.name}: measured {self.measured:.3e} vs tol {self.tolerance:.0e}{extra}"


def _result(name: str, measured: float, tol: float, detail: str = "") -> CheckResult:
    return CheckResult(name, bool(measured < tol), float(measured), tol, detail)


def _guard(name: str, tol: float, fn) -> CheckResult:
    try:
        return fn()
    except Exception as exc:  # noqa: BLE001 - any failure is a failed check
        return CheckResult(name, False, float("inf"), tol, f"{type(exc).__name__}: {exc}")


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------

def small_config(conditioning: str = "noise", levels: int = 2) -> ModelConfig:
    return ModelConfig(scale_factor=2, levels=levels, flow_steps=1, encoder_blocks=1,
                       encoder_width=8, coupling_hidden=8, conditioning=conditioning)


def randomize_parameters(model: NCSRModel, rng: Rng, amplitude: float = 0.15) -> None:
    """Perturb away from the identity-start so checks exercise real maps.

    The 1x1 mixing matrices keep their orthogonal draw; actnorm scales
    stay bounded away from zero.
    """
    for name, p in model.named_parameters():
        if name.endswith("mix.weight"):
            continue
        if name.endswith("scale_param"):
            p.data = 1.0 + 0.5 * amplitude * rng.gaussian(p.shape, 1.0)
        else:
            p.data = rng.gaussian(p.shape, amplitude)
    model.mark_actnorms_initialized()


def _toy_inputs(rng: Rng, model: NCSRModel, hr: int = 16, batch: int = 2):
    s = model.config.scale_factor
    x = Tensor(rng.uniform((batch, 3, hr, hr)))
    y = Tensor(rng.uniform((batch, 3, hr // s, hr // s)))
    v = Tensor(rng.gaussian((batch, 3, hr, hr), 0.05))
    return x, y, v


# ---------------------------------------------------------------------------
# quick checks
# ---------------------------------------------------------------------------

def check_rng_determinism(seed: int) -> CheckResult:
    a = Rng(seed).gaussian((3, 3, 8, 8), 1.0)
    b = Rng(seed).gaussian((3, 3, 8, 8), 1.0)
    measured = 0.0 if np.array_equal(a, b) else 1.0
    return _result("rng same-seed bitwise determinism", measured, 0.5)


def check_logdet_inverse(seed: int) -> CheckResult:
    rng = Rng(seed)
    worst = 0.0
    for _ in range(10):
        m = rng.gaussian((5, 5), 1.0) + 3.0 * np.eye(5)
        ld, inv = logdet_and_inverse(SquareMatrix(m))
        ld_inv, _ = logdet_and_inverse(inv)
        worst = max(worst, abs(np.exp(ld) * np.exp(ld_inv) - 1.0))
    return _result("logdet(M) + logdet(M^-1) consistency", worst, 1e-9)


def check_bicubic_constants(seed: int) -> CheckResult:
    rng = Rng(seed)
    worst = 0.0
    for scale in (0.5, 2.0, 0.25):
        value = float(rng.uniform())
        img = Tensor(np.full((1, 3, 8, 8), value))
        out = bicubic_resize(img, scale)
        worst = max(worst, float(np.abs(out.data - value).max()))
    return _result("bicubic constant preservation", worst, 1e-12)


def check_squeeze_exact(seed: int) -> CheckResult:
    rng = Rng(seed)
    x = Tensor(rng.uniform((2, 3, 6, 4)))
    state = fl.FlowState.wrap(x)
    sq = fl.Squeeze()
    back = sq.inverse(sq.forward(state))
    enumerated = fl.Squeeze().forward(
        fl.FlowState.wrap(Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]])))).h
    order_err = float(np.abs(enumerated.data.ravel() - [1, 2, 3, 4]).max())
    rt_err = 0.0 if np.array_equal(back.h.data, x.data) else 1.0
    return _result("squeeze enumeration + bitwise inverse", max(order_err, rt_err), 0.5)


def _layer_roundtrip_errors(seed: int) -> float:
    rng = Rng(seed)
    worst = 0.0
    h = Tensor(rng.gaussian((2, 4, 6, 6), 1.0))
    u = Tensor(rng.gaussian((2, 8, 6, 6), 1.0))
    nm = Tensor(rng.gaussian((2, 4, 6, 6), 0.3))
    cond = fl.ConditioningBundle(u=u, noise=nm, mode=fl.COND_NOISE)

    an = fl.ActNorm(4)
    an.scale_param.data = 1.0 + 0.2 * rng.gaussian((1, 4, 1, 1), 1.0)
    an.shift_param.data = rng.gaussian((1, 4, 1, 1), 0.3)
    layers = [("actnorm", an, None), ("conv1x1", fl.InvertibleConv1x1(rng, 4), None)]
    inj = fl.AffineInjector(4, 8, 8)
    apply_structured_init(inj, "probe_inj.")
    inj.net.conv_out.weight.data = rng.gaussian(inj.net.conv_out.weight.shape, 0.2)
    layers.append(("injector", inj, cond))
    for use_noise, label in ((False, "coupling"), (True, "noise coupling")):
        cp = fl.AffineCoupling(4, 8, 4, 8, use_noise=use_noise)
        apply_structured_init(cp, f"probe_{label}.")
        cp.net.conv_out.weight.data = rng.gaussian(cp.net.conv_out.weight.shape, 0.2)
        layers.append((label, cp, cond))

    with no_grad():
        for _name, layer, lc in layers:
            state = fl.FlowState.wrap(h)
            fwd = layer.forward(state, lc) if lc is not None else layer.forward(state)
            back = layer.inverse(fwd, lc) if lc is not None else layer.inverse(fwd)
            worst = max(worst, float(np.abs(back.h.data - h.data).max()))
            worst = max(worst, float(np.abs(back.logdet.data).max()))
        sp = fl.Split(4)
        sp.prior_net.weight.data = rng.gaussian(sp.prior_net.weight.shape, 0.2)
        state, z, _lp = sp.forward(fl.FlowState.wrap(h))
        restored = sp.inverse(state, z=z)
        worst = max(worst, float(np.abs(restored.h.data - h.data).max()))
    return worst


def check_layer_roundtrips(seed: int) -> CheckResult:
    return _result("layer forward/inverse round trips", _layer_roundtrip_errors(seed), 1e-9)


def numeric_jacobian(fn, x0: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian of a flat vector map."""
    d = x0.size
    base = fn(x0)
    jac = np.zeros((base.size, d))
    for j in range(d):
        xp = x0.copy()
        xp[j] += step
        xm = x0.copy()
        xm[j] -= step
        jac[:, j] = (fn(xp) - fn(xm)) / (2 * step)
    return jac


def _layer_logdet_errors(seed: int) -> float:
    """Accumulated log-dets vs |det| of numerically assembled Jacobians."""
    rng = Rng(seed)
    worst = 0.0
    u = Tensor(rng.gaussian((1, 4, 2, 2), 1.0))
    nm = Tensor(rng.gaussian((1, 2, 2, 2), 0.3))
    cond = fl.ConditioningBundle(u=u, noise=nm, mode=fl.COND_NOISE)

    an = fl.ActNorm(2)
    an.scale_param.data = 1.0 + 0.2 * rng.gaussian((1, 2, 1, 1), 1.0)
    an.shift_param.data = rng.gaussian((1, 2, 1, 1), 0.3)
    mix3 = fl.InvertibleConv1x1(rng, 3)
    mix3.weight.data = mix3.weight.data + 0.2 * rng.gaussian(mix3.weight.shape, 1.0)
    inj = fl.AffineInjector(2, 4, 6)
    apply_structured_init(inj, "probe_jinj.")
    inj.net.conv_out.weight.data = rng.gaussian(inj.net.conv_out.weight.shape, 0.3)
    cpl = fl.AffineCoupling(2, 4, 2, 6, use_noise=True)
    apply_structured_init(cpl, "probe_jcpl.")
    cpl.net.conv_out.weight.data = rng.gaussian(cpl.net.conv_out.weight.shape, 0.3)

    cases = [
        ("actnorm", an, None, (1, 2, 2, 2)),
        ("conv1x1 C=3", mix3, None, (1, 3, 2, 2)),
        ("injector", inj, cond, (1, 2, 2, 2)),
        ("noise coupling", cpl, cond, (1, 2, 2, 2)),
    ]
    with no_grad():
        for _name, layer, lc, shape in cases:
            x0 = rng.gaussian(shape, 1.0)

            def fwd_flat(flat, layer=layer, lc=lc, shape=shape):
                st = fl.FlowState.wrap(Tensor(flat.reshape(shape)))
                out = layer.forward(st, lc) if lc is not None else layer.forward(st)
                return out.h.data.ravel().copy()

            st = fl.FlowState.wrap(Tensor(x0))
            out = layer.forward(st, lc) if lc is not None else layer.forward(st)
            analytic = float(out.logdet.data.reshape(()))
            jac = numeric_jacobian(fwd_flat, x0.ravel())
            _sign, brute = np.linalg.slogdet(jac)
            worst = max(worst, abs(analytic - brute))
    return worst


def check_layer_logdets(seed: int) -> CheckResult:
    return _result("layer log-dets vs full Jacobian (toy size)", _layer_logdet_errors(seed), 1e-7)


def check_chain_additivity(seed: int) -> CheckResult:
    rng = Rng(seed)
    an = fl.ActNorm(4)
    an.scale_param.data = 1.0 + 0.2 * rng.gaussian((1, 4, 1, 1), 1.0)
    mix = fl.InvertibleConv1x1(rng, 4)
    x = Tensor(rng.gaussian((2, 4, 4, 4), 1.0))
    with no_grad():
        s1 = an.forward(fl.FlowState.wrap(x))
        ld_a = s1.logdet.data.copy()
        s2 = mix.forward(fl.FlowState.wrap(s1.h))
        ld_b = s2.logdet.data.copy()
        chained = mix.forward(an.forward(fl.FlowState.wrap(x)))
    err = float(np.abs(chained.logdet.data - (ld_a + ld_b)).max())
    return _result("composed chain log-det additivity", err, 1e-12)


def model_roundtrip_error(model: NCSRModel, rng: Rng, hr: int = 16, batch: int = 2) -> float:
    x, y, v = _toy_inputs(rng, model, hr, batch)
    with no_grad():
        _loss, info = model.nll(x, y, v, collect_latents=True)
    xr = model.inverse_from_latents(info["latents"], y, v)
    return float(np.abs(xr.data - x.data).max())


def check_model_roundtrip(seed: int, model: NCSRModel | None = None) -> CheckResult:
    rng = Rng(seed)
    if model is None:
        model = NCSRModel(small_config(), rng.child("build"))
        randomize_parameters(model, rng.child("params"))
    err = model_roundtrip_error(model, rng.child("data"))
    return _result("model inverse(forward) round trip", err, 1e-8)


def check_metric_oracles(seed: int) -> CheckResult:
    worst = 0.0
    gt = Tensor(np.zeros((1, 3, 1, 2)))
    a = Tensor(np.broadcast_to(np.array([0.1, 0.3]), (1, 3, 1, 2)).copy())
    b = Tensor(np.broadcast_to(np.array([0.3, 0.1]), (1, 3, 1, 2)).copy())
    lr = Tensor(np.zeros((1, 3, 1, 1)))
    ss = SampleSet([a, b], gt, lr, 2)
    div, degenerate = diversity_score(ss)
    worst = max(worst, abs(div - 80.0))
    if degenerate:
        worst = max(worst, 1.0)

    same = SampleSet([a, Tensor(a.data.copy())], gt, lr, 2)
    div0, _ = diversity_score(same)
    worst = max(worst, abs(div0))

    p = psnr(Tensor(np.full((1, 3, 4, 4), 0.6)), Tensor(np.full((1, 3, 4, 4), 0.5)))
    worst = max(worst, abs(p - 20.0))

    rng = Rng(seed)
    samples = [Tensor(rng.uniform((1, 3, 4, 4))) for _ in range(5)]
    ss2 = SampleSet(samples, samples[0], Tensor(rng.uniform((1, 3, 2, 2))), 2)
    mean_db, worst_db = lr_psnr(ss2)
    if not worst_db <= mean_db:
        worst = max(worst, 1.0)
    return _result("metric closed-form oracles", worst, 1e-9)


def check_sampling_determinism(seed: int) -> CheckResult:
    rng = Rng(seed)
    model = NCSRModel(small_config(), rng.child("build"))
    randomize_parameters(model, rng.child("params"))
    y = Tensor(Rng(seed + 1).uniform((1, 3, 8, 8)))
    s1 = model.sample(y, temperature=0.8, rng=Rng(seed + 2), n_samples=2)
    s2 = model.sample(y, temperature=0.8, rng=Rng(seed + 2), n_samples=2)
    same = all(np.array_equal(a.data, b.data) for a, b in zip(s1, s2))
    return _result("sampling same-seed determinism", 0.0 if same else 1.0, 0.5)


# ---------------------------------------------------------------------------
# full-level checks
# ---------------------------------------------------------------------------

def model_nll_vs_bruteforce(model: NCSRModel, rng: Rng, hr: int = 4,
                            n_inputs: int = 10) -> float:
    """|accumulated-logdet NLL - full-Jacobian change-of-variables| in nats."""
    s = model.config.scale_factor
    y = Tensor(rng.uniform((1, 3, hr // s, hr // s)))
    v = Tensor(rng.gaussian((1, 3, hr, hr), 0.05))
    worst = 0.0
    for _ in range(n_inputs):
        x0 = rng.uniform((1, 3, hr, hr))

        def latents_flat(flat):
            with no_grad():
                _l, info = model.nll(Tensor(flat.reshape(1, 3, hr, hr)), y, v,
                                     collect_latents=True)
            return np.concatenate([z.data.ravel() for z in info["latents"]])

        with no_grad():
            _loss, info = model.nll(Tensor(x0), y, v)
        nll_model = float(info["nll_nats"][0])
        logp = float(info["logp"][0])
        jac = numeric_jacobian(latents_flat, x0.ravel(), step=1e-6)
        _sign, logdet_brute = np.linalg.slogdet(jac)
        nll_brute = -(logp + logdet_brute)
        worst = max(worst, abs(nll_model - nll_brute))
    return worst


def check_exact_likelihood(seed: int, model: NCSRModel | None = None,
                           n_inputs: int = 10) -> CheckResult:
    rng = Rng(seed)
    if model is None:
        model = NCSRModel(small_config(levels=1), rng.child("build"))
        randomize_parameters(model, rng.child("params"), amplitude=0.1)
    err = model_nll_vs_bruteforce(model, rng.child("data"), hr=4, n_inputs=n_inputs)
    return _result("NLL vs brute-force full-Jacobian (<=48 dims)", err, 1e-6)


PARAM_CLASSES = {
    "actnorm": lambda n: n.endswith(("scale_param", "shift_param")),
    "conv1x1": lambda n: n.endswith("mix.weight"),
    "coupling nets": lambda n: (".inject." in n or ".couple." in n or ".noise_couple." in n),
    "encoder": lambda n: n.startswith("encoder."),
    "split prior": lambda n: ".split.prior_net." in n,
}


def gradient_sweep(model: NCSRModel, rng: Rng, probes_per_class: int = 20,
                   step: float = 1e-5) -> dict[str, float]:
    """Max relative FD-vs-analytic gradient error per parameter class.

    Relative error uses max(|fd|, |analytic|, 1e-6) as denominator so
    genuinely negligible components cannot dominate the statistic.
    """
    x, y, v = _toy_inputs(rng.child("data"), model)
    params = dict(model.named_parameters())

    loss, _ = model.nll(x, y, v)
    model.zero_grad()
    T.backward(loss)

    def loss_value() -> float:
        with no_grad():
            l2, _ = model.nll(x, y, v)
        return l2.item()

    probe_rng = rng.child("probes")
    out: dict[str, float] = {}
    for cls, match in PARAM_CLASSES.items():
        names = sorted(n for n in params if match(n))
        if not names:
            continue
        worst = 0.0
        for _ in range(probes_per_class):
            name = names[probe_rng.integers(0, len(names))]
            p = params[name]
            idx = int(probe_rng.integers(0, p.data.size))
            flat = p.data.ravel()
            orig = flat[idx]
            flat[idx] = orig + step
            up = loss_value()
            flat[idx] = orig - step
            down = loss_value()
            flat[idx] = orig
            fd = (up - down) / (2 * step)
            an = float(p.grad.ravel()[idx]) if p.grad is not None else 0.0
            rel = abs(fd - an) / max(abs(fd), abs(an), 1e-6)
            worst = max(worst, rel)
        out[cls] = worst
    return out


def check_gradients(seed: int, model: NCSRModel | None = None,
                    probes_per_class: int = 20) -> list[CheckResult]:
    rng = Rng(seed)
    if model is None:
        model = NCSRModel(small_config(), rng.child("build"))
        randomize_parameters(model, rng.child("params"))
    errors = gradient_sweep(model, rng, probes_per_class)
    return [_result(f"finite-difference gradients: {cls}", err, 1e-4)
            for cls, err in errors.items()]


# ---------------------------------------------------------------------------
# suite driver
# ---------------------------------------------------------------------------

def run_verify(level: str = "quick", seed: int = 0) -> list[CheckResult]:
    if level not in ("quick", "full"):
        raise ValueError(f"level must be quick or full, got {level!r}")
    checks = [
        _guard("rng same-seed bitwise determinism", 0.5, lambda: check_rng_determinism(seed)),
        _guard("logdet(M) + logdet(M^-1) consistency", 1e-9, lambda: check_logdet_inverse(seed)),
        _guard("bicubic constant preservation", 1e-12, lambda: check_bicubic_constants(seed)),
        _guard("squeeze enumeration + bitwise inverse", 0.5, lambda: check_squeeze_exact(seed)),
        _guard("layer forward/inverse round trips", 1e-9, lambda: check_layer_roundtrips(seed)),
        _guard("layer log-dets vs full Jacobian (toy size)", 1e-7, lambda: check_layer_logdets(seed)),
        _guard("composed chain log-det additivity", 1e-12, lambda: check_chain_additivity(seed)),
        _guard("model inverse(forward) round trip", 1e-8, lambda: check_model_roundtrip(seed)),
        _guard("metric closed-form oracles", 1e-9, lambda: check_metric_oracles(seed)),
        _guard("sampling same-seed determinism", 0.5, lambda: check_sampling_determinism(seed)),
    ]
    if level == "full":
        checks.append(_guard("NLL vs brute-force full-Jacobian (<=48 dims)", 1e-6,
                             lambda: check_exact_likelihood(seed)))
        try:
            checks.extend(check_gradients(seed))
        except Exception as exc:  # noqa: BLE001
            checks.append(CheckResult("finite-difference gradients", False,
                                      float("inf"), 1e-4, f"{type(exc).__name__}: {exc}"))
    return checks
