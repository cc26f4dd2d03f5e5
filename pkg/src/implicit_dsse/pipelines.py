"""Dataset construction and the three estimation strategies.

* SF - a network maps available measurements straight to the state.
* PS - a network predicts the delayed measurements; WLS runs on the
  concatenation with pseudo-measurement weights from training residuals.
* IL - same network and inference path as PS, fine-tuned end to end through
  the WLS layer with the hybrid loss
  ``gamma * |x_hat - x_ref|^2 + (1 - gamma) * |z_d_hat - z_d|^2``.
"""

from __future__ import annotations

import io
import json
import logging
import zipfile
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, ContractViolation, DivergenceError, TrainingAborted
from .grid import BusNetwork
from .measurements import (MeasurementModel, MeasurementPlan, StateVector, add_noise, flat_start,
                           make_plan)
from .neural import (AdamWState, MlpModel, TrainController, TrainingConfig, adamw_step,
                     controller_update, mlp_backward, mlp_forward)
from .powerflow import sample_demand, solve_power_flow
from .wls import (EVAL_OPTIONS, WlsBatch, WlsOptions, wls_adjoint, wls_solve_batch,
                  weights_from_sigma)

log = logging.getLogger(__name__)

DEFAULT_COUNTS = (1400, 300, 300)
SIGMA_D_FLOOR = 1e-6
MAX_REGEN_RATE = 0.01
MAX_SKIP_RATE = 0.05
METHODS = ("SF", "PS", "IL")


# -- datasets --------------------------------------------------------------

@dataclass(frozen=True)
class Sample:
    z_a: np.ndarray
    z_d: np.ndarray
    x_ref: StateVector
    x_true: StateVector


@dataclass
class Dataset:
    """Stacked samples; rows of every array share the sample index."""

    z_a: np.ndarray
    z_d: np.ndarray
    x_ref: np.ndarray
    x_true: np.ndarray
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __len__(self):
        return self.z_a.shape[0]

    def __getitem__(self, t) -> Sample:
        return Sample(self.z_a[t], self.z_d[t], StateVector.from_array(self.x_ref[t]),
                      StateVector.from_array(self.x_true[t]))

    @property
    def split_sizes(self):
        return len(self.train), len(self.val), len(self.test)

    def resplit(self, seed: int) -> "Dataset":
        """Same sample pool, new random train/val/test partition."""
        train, val, test = _split(len(self), self.split_sizes, seed)
        prov = {**self.provenance, "split_seed": int(seed)}
        return replace(self, train=train, val=val, test=test, provenance=prov)


def _split(total, counts, seed):
    perm = np.random.default_rng(np.random.SeedSequence([int(seed), 1])).permutation(total)
    a, b, _ = counts
    return np.sort(perm[:a]), np.sort(perm[a:a + b]), np.sort(perm[a + b:])


def _sample_rng(seed, t, attempt):
    return np.random.default_rng(np.random.SeedSequence([int(seed), 0, int(t), int(attempt)]))


def build_dataset(network: BusNetwork, scenario, variability: float, counts=DEFAULT_COUNTS,
                  seed: int = 0, noise_scale: float = 1.0) -> Dataset:
    """Generate (z_a, z_d, x_ref, x_true) samples for one network/scenario/variability.

    Each sample: demand draw -> power flow -> noisy measurements on the full
    plan -> retrospective WLS on ``[z_a, z_d]`` with sensor weights.  Samples
    whose power flow or retrospective solve fails are regenerated from a
    derived seed.  ``noise_scale`` multiplies the injected noise only.
    """
    plan = scenario if isinstance(scenario, MeasurementPlan) else make_plan(scenario, network)
    counts = tuple(int(c) for c in counts)
    if len(counts) != 3 or min(counts) < 0 or sum(counts) == 0:
        raise ConfigurationError(f"counts must be three non-negative integers, got {counts}")
    if not noise_scale > 0:
        raise ConfigurationError("noise_scale must be positive")
    total = sum(counts)
    model = MeasurementModel(network, plan)
    sigma = plan.sigma_vector
    w = weights_from_sigma(sigma)

    x_true = np.empty((total, network.n_state))
    z = np.empty((total, plan.m))
    attempts = np.zeros(total, dtype=int)
    regenerated = 0

    def draw(t):
        nonlocal regenerated
        while True:
            rng = _sample_rng(seed, t, attempts[t])
            try:
                state = solve_power_flow(network, sample_demand(network, variability, rng))
            except DivergenceError:
                attempts[t] += 1
                regenerated += 1
                _check_regen(regenerated, total)
                continue
            x = state.to_array()
            x_true[t] = x
            z[t] = add_noise(model.h(x), sigma * noise_scale, rng)
            return

    for t in range(total):
        draw(t)
    pending = np.arange(total)
    x_ref = np.empty_like(x_true)
    while pending.size:
        batch = wls_solve_batch(z[pending], model, w, opts=EVAL_OPTIONS)
        good = batch.converged
        x_ref[pending[good]] = batch.x_hat[good]
        pending = pending[~good]
        for t in pending:
            attempts[t] += 1
            regenerated += 1
            _check_regen(regenerated, total)
            draw(t)
    if regenerated:
        log.info("regenerated %d of %d samples", regenerated, total)

    train, val, test = _split(total, counts, seed)
    provenance = {
        "network": network.name, "network_hash": network.digest(), "scenario": plan.name,
        "variability": float(variability), "seed": int(seed), "split_seed": int(seed),
        "counts": list(counts), "noise_scale": float(noise_scale), "regenerated": int(regenerated),
        "m_a": plan.m_a, "m_d": plan.m_d, "plan": plan.to_dict(),
    }
    return Dataset(z[:, :plan.m_a].copy(), z[:, plan.m_a:].copy(), x_ref, x_true,
                   train, val, test, provenance)


def _check_regen(regenerated, total):
    if regenerated > MAX_REGEN_RATE * total:
        raise DivergenceError(f"sample regeneration rate exceeded {MAX_REGEN_RATE:.0%} ({regenerated}/{total})")


_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


def _write_zip(path, members: dict):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, data in members.items():
            info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
            info.external_attr = 0o644 << 16
            zf.writestr(info, data)
    tmp.replace(path)


def _npy_bytes(arr):
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(arr), allow_pickle=False)
    return buf.getvalue()


def save_dataset(dataset: Dataset, path):
    """Write a deterministic zip bundle: one .npy per column plus provenance.json."""
    members = {"provenance.json": json.dumps(dataset.provenance, sort_keys=True, indent=1).encode()}
    for name in ("z_a", "z_d", "x_ref", "x_true", "train", "val", "test"):
        members[f"{name}.npy"] = _npy_bytes(getattr(dataset, name))
    _write_zip(path, members)


def load_dataset(path) -> Dataset:
    with zipfile.ZipFile(path) as zf:
        prov = json.loads(zf.read("provenance.json"))
        arrays = {n[:-4]: np.lib.format.read_array(io.BytesIO(zf.read(n)), allow_pickle=False)
                  for n in zf.namelist() if n.endswith(".npy")}
    return Dataset(provenance=prov, **arrays)


# -- predictors ------------------------------------------------------------

@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, data):
        std = data.std(axis=0)
        return cls(data.mean(axis=0), np.where(std > 1e-12, std, 1.0))

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["mean"], dtype=float), np.array(d["std"], dtype=float))


@dataclass
class Predictor:
    """MLP in standardized coordinates with physical-unit inputs and outputs."""

    net: MlpModel
    x_scaler: Standardizer
    y_scaler: Standardizer

    def forward(self, z_a):
        out, cache = mlp_forward(self.net, (np.atleast_2d(z_a) - self.x_scaler.mean) / self.x_scaler.std)
        return out * self.y_scaler.std + self.y_scaler.mean, cache

    def predict(self, z_a):
        z_a = np.asarray(z_a, dtype=float)
        out = self.forward(z_a)[0]
        return out[0] if z_a.ndim == 1 else out

    def backward(self, cache, grad_out):
        """Parameter gradients for an upstream gradient in physical output units."""
        grads, _ = mlp_backward(self.net, cache, grad_out * self.y_scaler.std)
        return grads

    def copy(self):
        return Predictor(self.net.copy(), self.x_scaler, self.y_scaler)


@dataclass
class PseudoSigma:
    sigma_d: np.ndarray

    def __post_init__(self):
        self.sigma_d = np.asarray(self.sigma_d, dtype=float)
        if np.any(~(self.sigma_d > 0)) or not np.all(np.isfinite(self.sigma_d)):
            raise ContractViolation("pseudo-measurement sigmas must be positive and finite")


@dataclass
class TrainedModel:
    method: str
    predictor: Predictor
    sigma_d: PseudoSigma | None = None
    gamma: float | None = None
    history: dict = field(default_factory=dict)
    train_state: dict = field(default_factory=dict)


def _fit(predictor: Predictor, n_train: int, batch_step, val_loss, config: TrainingConfig):
    """Minibatch AdamW loop with plateau LR schedule and early stopping.

    ``batch_step(idx)`` returns (loss, grads, info); ``val_loss()`` returns a
    float.  On exit the predictor holds the best-validation parameters.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(config.seed), 2]))
    opt = AdamWState(lr=config.learning_rate, weight_decay=config.weight_decay)
    ctl = TrainController.from_config(config)
    hist = {"train_loss": [], "val_loss": [], "lr": [], "skipped": 0, "nonconverged": 0}
    for _ in range(config.max_epochs):
        perm = rng.permutation(n_train)
        total, count = 0.0, 0
        for start in range(0, n_train, config.batch_size):
            idx = perm[start:start + config.batch_size]
            loss, grads, info = batch_step(idx)
            if not np.isfinite(loss):
                raise TrainingAborted(f"non-finite training loss at epoch {ctl.epoch + 1}")
            adamw_step(opt, predictor.net, grads)
            total += loss * len(idx)
            count += len(idx)
            hist["skipped"] += info.get("skipped", 0)
            hist["nonconverged"] += info.get("nonconverged", 0)
        v = val_loss()
        hist["train_loss"].append(total / max(count, 1))
        hist["val_loss"].append(float(v))
        hist["lr"].append(opt.lr)
        action = controller_update(ctl, v, predictor.net.params)
        if action == "reduce_lr":
            opt.lr = ctl.current_lr
        elif action == "stop":
            break
    if ctl.best_params is not None:
        predictor.net.set_params(ctl.best_params)
    hist["epochs"] = ctl.epoch
    hist["best_epoch"] = ctl.best_epoch
    hist["best_val_loss"] = ctl.best_val_loss
    state = {
        "optimizer": {"lr": opt.lr, "weight_decay": opt.weight_decay, "betas": [opt.beta1, opt.beta2],
                      "eps": opt.eps, "step": opt.step, "m": [a.tolist() for a in opt.m],
                      "v": [a.tolist() for a in opt.v]},
        "controller": {"best_val_loss": ctl.best_val_loss, "best_epoch": ctl.best_epoch,
                       "stall_counter": ctl.stall_counter, "lr_stall_counter": ctl.lr_stall_counter,
                       "epoch": ctl.epoch, "current_lr": ctl.current_lr},
    }
    return hist, state


def _mse_step(predictor, inputs, targets):
    def step(idx):
        pred, cache = predictor.forward(inputs[idx])
        diff = pred - targets[idx]
        loss = float(np.mean(np.sum(diff ** 2, axis=1)))
        grads = predictor.backward(cache, 2.0 * diff / len(idx))
        return loss, grads, {}
    return step


def _mse(predictor, inputs, targets):
    return float(np.mean(np.sum((predictor.predict(inputs) - targets) ** 2, axis=1)))


def _new_predictor(inputs, targets, seed):
    net = MlpModel.standard(inputs.shape[1], targets.shape[1], seed=seed)
    return Predictor(net, Standardizer.fit(inputs), Standardizer.fit(targets))


def _require_splits(dataset):
    if len(dataset.train) == 0 or len(dataset.val) == 0:
        raise ConfigurationError("dataset needs non-empty train and validation splits")


def train_sf(dataset: Dataset, config: TrainingConfig) -> TrainedModel:
    """State forecaster: MSE between f(z_a) and the retrospective estimate."""
    _require_splits(dataset)
    tr, va = dataset.train, dataset.val
    predictor = _new_predictor(dataset.z_a[tr], dataset.x_ref[tr], config.seed)
    hist, state = _fit(predictor, len(tr), _mse_step(predictor, dataset.z_a[tr], dataset.x_ref[tr]),
                       lambda: _mse(predictor, dataset.z_a[va], dataset.x_ref[va]), config)
    return TrainedModel("SF", predictor, history=hist, train_state=state)


def pseudo_sigma(predictor: Predictor, z_a, z_d) -> PseudoSigma:
    """Per-channel RMS residual of the predictor, floored at 1e-6."""
    sigma = np.sqrt(np.mean((predictor.predict(z_a) - z_d) ** 2, axis=0))
    low = sigma < SIGMA_D_FLOOR
    if low.any():
        log.warning("flooring %d pseudo-measurement sigmas at %g", int(low.sum()), SIGMA_D_FLOOR)
    return PseudoSigma(np.maximum(sigma, SIGMA_D_FLOOR))


def train_ps(dataset: Dataset, config: TrainingConfig) -> TrainedModel:
    """Pseudo-measurement generator: MSE between g(z_a) and z_d, then sigma_d."""
    _require_splits(dataset)
    tr, va = dataset.train, dataset.val
    predictor = _new_predictor(dataset.z_a[tr], dataset.z_d[tr], config.seed)
    hist, state = _fit(predictor, len(tr), _mse_step(predictor, dataset.z_a[tr], dataset.z_d[tr]),
                       lambda: _mse(predictor, dataset.z_a[va], dataset.z_d[va]), config)
    sigma_d = pseudo_sigma(predictor, dataset.z_a[tr], dataset.z_d[tr])
    return TrainedModel("PS", predictor, sigma_d=sigma_d, history=hist, train_state=state)


def estimation_weights(plan: MeasurementPlan, sigma_d: PseudoSigma) -> np.ndarray:
    """W diagonal: sensor sigmas for available channels, sigma_d for pseudo ones."""
    sig_d = np.asarray(sigma_d.sigma_d if isinstance(sigma_d, PseudoSigma) else sigma_d, dtype=float)
    if sig_d.shape != (plan.m_d,):
        raise ContractViolation(f"sigma_d has shape {sig_d.shape}, plan expects ({plan.m_d},)")
    return np.concatenate([weights_from_sigma([s.sigma for s in plan.available]), sig_d ** -2.0])


@dataclass
class HybridBatch:
    loss: float
    state_loss: float
    meas_loss: float
    grads: list
    x_hat: np.ndarray
    grad_zd_adjoint: np.ndarray
    grad_zd_direct: np.ndarray
    valid: np.ndarray
    nonconverged: int


def il_batch_gradient(predictor: Predictor, z_a, z_d, x_ref, meas_model: MeasurementModel, w,
                      gamma: float, opts: WlsOptions, x0=None) -> HybridBatch:
    """Hybrid loss and its parameter gradient through the WLS layer.

    Samples whose WLS solve is rank deficient or non-finite are dropped and
    the 1/|B| normalisation uses the remaining count.
    """
    m_a = z_a.shape[1]
    zd_hat, cache = predictor.forward(z_a)
    z_full = np.concatenate([z_a, zd_hat], axis=1)
    sol = wls_solve_batch(z_full, meas_model, w, x0=x0, opts=opts)
    valid = sol.ok
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise TrainingAborted("every WLS solve in the batch failed")
    dx = np.where(valid[:, None], sol.x_hat - x_ref, 0.0)
    dz = np.where(valid[:, None], zd_hat - z_d, 0.0)
    state_loss = float(np.sum(dx ** 2) / n_valid)
    meas_loss = float(np.sum(dz ** 2) / n_valid)
    loss = gamma * state_loss + (1.0 - gamma) * meas_loss

    grad_x = 2.0 * gamma * dx / n_valid
    grad_adj = np.zeros_like(zd_hat)
    if valid.any():
        jac = sol.jacobian[valid]
        gz, ok = wls_adjoint(jac, np.broadcast_to(w, (n_valid, len(w))), grad_x[valid], strict=False)
        grad_adj[valid] = np.where(ok[:, None], gz[:, m_a:], 0.0)
    grad_direct = 2.0 * (1.0 - gamma) * dz / n_valid
    grads = predictor.backward(cache, grad_adj + grad_direct)
    return HybridBatch(loss, state_loss, meas_loss, grads, sol.x_hat, grad_adj, grad_direct, valid,
                       int(np.sum(valid & ~sol.converged)))


def ps_batch_gradient(predictor: Predictor, z_a, z_d):
    """Gradient of the PS training loss (mean squared pseudo-measurement error)."""
    pred, cache = predictor.forward(z_a)
    diff = pred - z_d
    return float(np.mean(np.sum(diff ** 2, axis=1))), predictor.backward(cache, 2.0 * diff / len(z_a))


def hybrid_loss(predictor, z_a, z_d, x_ref, meas_model, w, gamma, opts, x0=None, return_x=False):
    """Hybrid loss over a whole set (validation); optionally also the estimates."""
    zd_hat = predictor.predict(z_a)
    sol = wls_solve_batch(np.concatenate([z_a, zd_hat], axis=1), meas_model, w, x0=x0, opts=opts)
    ok = sol.ok
    if not ok.any():
        raise TrainingAborted("every WLS solve failed during validation")
    st = np.sum((sol.x_hat[ok] - x_ref[ok]) ** 2) / ok.sum()
    ms = np.sum((zd_hat[ok] - z_d[ok]) ** 2) / ok.sum()
    loss = float(gamma * st + (1.0 - gamma) * ms)
    return (loss, sol.x_hat) if return_x else loss


def perturbed_copy(predictor: Predictor, std: float, seed: int) -> Predictor:
    """Copy with i.i.d. Gaussian noise added to every parameter tensor."""
    out = predictor.copy()
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 3]))
    out.net.set_params([p + std * rng.standard_normal(p.shape) for p in out.net.params])
    return out


def train_il(dataset: Dataset, config: TrainingConfig, warm_start: TrainedModel, sigma_d: PseudoSigma,
             network: BusNetwork, plan: MeasurementPlan) -> TrainedModel:
    """End-to-end fine-tuning of a PS generator through the WLS layer."""
    _require_splits(dataset)
    if warm_start is None or warm_start.method != "PS":
        raise ConfigurationError("IL training requires a trained PS model as warm start")
    if warm_start.predictor.net.layer_dims[-1] != plan.m_d or warm_start.predictor.net.layer_dims[0] != plan.m_a:
        raise ConfigurationError("warm-start model dimensions do not match the measurement plan")
    tr, va = dataset.train, dataset.val
    meas_model = MeasurementModel(network, plan)
    w = estimation_weights(plan, sigma_d)
    train_opts = WlsOptions(max_iters=config.gn_iters)
    predictor = perturbed_copy(warm_start.predictor, config.warm_start_noise, config.seed)
    za, zd, xr = dataset.z_a[tr], dataset.z_d[tr], dataset.x_ref[tr]
    skipped = [0, 0]
    # per-sample Gauss-Newton starting points (flat unless warm starting)
    flat = flat_start(network)
    x_train = np.tile(flat, (len(tr), 1))
    x_val = np.tile(flat, (len(va), 1))

    def remember(cache, idx, x_hat):
        if config.gn_warm_start:
            good = np.all(np.isfinite(x_hat), axis=1)
            cache[idx] = np.where(good[:, None], x_hat, flat)

    def step(idx):
        res = il_batch_gradient(predictor, za[idx], zd[idx], xr[idx], meas_model, w,
                                config.gamma, train_opts, x0=x_train[idx])
        remember(x_train, idx, res.x_hat)
        n_skip = int(len(idx) - res.valid.sum())
        skipped[0] += n_skip
        skipped[1] += len(idx)
        if skipped[0] > MAX_SKIP_RATE * skipped[1]:
            raise TrainingAborted(f"WLS skip rate above {MAX_SKIP_RATE:.0%}")
        if res.nonconverged:
            log.debug("%d non-converged WLS solves in batch", res.nonconverged)
        return res.loss, res.grads, {"skipped": n_skip, "nonconverged": res.nonconverged}

    def val():
        loss, x_hat = hybrid_loss(predictor, dataset.z_a[va], dataset.z_d[va], dataset.x_ref[va],
                                  meas_model, w, config.gamma, train_opts, x0=x_val, return_x=True)
        remember(x_val, slice(None), x_hat)
        return loss

    hist, state = _fit(predictor, len(tr), step, val, config)
    return TrainedModel("IL", predictor, sigma_d=sigma_d, gamma=config.gamma, history=hist,
                        train_state=state)


# -- inference -------------------------------------------------------------

@dataclass
class Estimate:
    x: np.ndarray
    wls: WlsBatch | None = None

    @property
    def converged(self):
        if self.wls is None:
            return np.ones(self.x.shape[0], dtype=bool)
        return self.wls.converged

    def states(self):
        return [StateVector.from_array(x) for x in self.x]


def estimate_batch(method, model: TrainedModel, z_a, plan: MeasurementPlan, network: BusNetwork,
                   sigma_d=None, opts: WlsOptions = EVAL_OPTIONS) -> Estimate:
    """Estimate states for stacked available measurements ``z_a`` (B, m_a)."""
    if method not in METHODS:
        raise ConfigurationError(f"unknown method {method!r}")
    z_a = np.atleast_2d(np.asarray(z_a, dtype=float))
    if z_a.shape[1] != plan.m_a or model.predictor.net.layer_dims[0] != plan.m_a:
        raise ContractViolation("model input size does not match the plan's available channels")
    if method == "SF":
        return Estimate(model.predictor.predict(z_a))
    sigma_d = sigma_d if sigma_d is not None else model.sigma_d
    if sigma_d is None:
        raise ConfigurationError(f"{method} inference needs pseudo-measurement sigmas")
    zd_hat = model.predictor.predict(z_a)
    return wls_with_pseudo(z_a, zd_hat, plan, network, sigma_d, opts)


def wls_with_pseudo(z_a, zd_hat, plan, network, sigma_d, opts: WlsOptions = EVAL_OPTIONS) -> Estimate:
    """Shared PS/IL path: WLS on [z_a, pseudo-measurements]."""
    meas_model = MeasurementModel(network, plan)
    w = estimation_weights(plan, sigma_d)
    sol = wls_solve_batch(np.concatenate([np.atleast_2d(z_a), np.atleast_2d(zd_hat)], axis=1),
                          meas_model, w, opts=opts)
    if not sol.converged.all():
        log.warning("%d of %d inference WLS solves did not converge", int((~sol.converged).sum()), len(sol))
    return Estimate(sol.x_hat, sol)


def estimate(method, model: TrainedModel, z_a, plan, network, sigma_d=None) -> StateVector:
    """Single-sample estimate; see :func:`estimate_batch` for metadata."""
    est = estimate_batch(method, model, np.asarray(z_a)[None, :], plan, network, sigma_d)
    return StateVector.from_array(est.x[0])


# -- checkpoints -----------------------------------------------------------

CHECKPOINT_VERSION = 1


def model_to_dict(model: TrainedModel, extra=None) -> dict:
    p = model.predictor
    return {
        "version": CHECKPOINT_VERSION,
        "method": model.method,
        "gamma": model.gamma,
        "layer_dims": list(p.net.layer_dims),
        "weights": [w.tolist() for w in p.net.weights],
        "biases": [b.tolist() for b in p.net.biases],
        "x_scaler": p.x_scaler.to_dict(),
        "y_scaler": p.y_scaler.to_dict(),
        "sigma_d": None if model.sigma_d is None else model.sigma_d.sigma_d.tolist(),
        "history": dict(model.history),
        "train_state": model.train_state,
        **(extra or {}),
    }


def model_from_dict(d: dict) -> TrainedModel:
    if d.get("version") != CHECKPOINT_VERSION:
        raise ContractViolation(f"unsupported checkpoint version {d.get('version')}")
    net = MlpModel(d["layer_dims"], weights=d["weights"], biases=d["biases"])
    pred = Predictor(net, Standardizer.from_dict(d["x_scaler"]), Standardizer.from_dict(d["y_scaler"]))
    sig = None if d.get("sigma_d") is None else PseudoSigma(np.array(d["sigma_d"]))
    return TrainedModel(d["method"], pred, sigma_d=sig, gamma=d.get("gamma"), history=d.get("history", {}),
                        train_state=d.get("train_state", {}))


def save_checkpoint(model: TrainedModel, path, extra=None):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(model_to_dict(model, extra), sort_keys=True))
    tmp.replace(path)


def load_checkpoint(path) -> tuple[TrainedModel, dict]:
    d = json.loads(Path(path).read_text())
    return model_from_dict(d), d
