"""End-to-end experiment orchestration.

Modes:
  baseline            real windows only, early-stopped training
  gaussian            real windows plus noise-augmented copies, same protocol
  dad4ts              joint loop: diffusion training, per-batch generation,
                      valuation, selective forecaster updates, policy reward
  dad4ts_once         like dad4ts but the generated buffers freeze after the
                      first epoch
  dad4ts_no_selector  like dad4ts with an all-ones selection mask and a
                      frozen selector
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch

from . import conditioner, forecast, geometry, metrics, rectflow, selector as selector_mod
from .common import DTYPE, derive_rng, save_params, seed_torch, stable_hash, to_tensor
from .data import (
    SplitDataset,
    TimeSeriesDataset,
    WindowBatch,
    load_series,
    split_normalize,
    stl_gaussian_augment,
    window_batches,
)
from .errors import ConfigurationError, ContractError, DivergenceError

MODES = ("baseline", "gaussian", "dad4ts", "dad4ts_once", "dad4ts_no_selector")
DVRL_MODES = ("dad4ts", "dad4ts_once", "dad4ts_no_selector")


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: dict
    horizons: tuple
    forecasters: tuple = ("linear",)
    modes: tuple = ("baseline", "dad4ts")
    input_len: int = 12
    epochs: int = 20
    seed: int = 2025
    batch_size: int = 4
    noise_scale: float = 1.0
    sign_policy: str = "paired"
    sampler: rectflow.SamplerConfig = field(default_factory=rectflow.SamplerConfig)
    train: forecast.TrainConfig = field(default_factory=forecast.TrainConfig)
    velocity: rectflow.VelocityModelConfig = field(default_factory=rectflow.VelocityModelConfig)
    velocity_lr: float = 3e-3
    velocity_weight_decay: float = 0.1
    selector_lr: float = 1e-3
    gate_hidden: int = 64
    cfg_per_step: bool = False
    reward_val_batches: int | None = None
    providers: tuple = ({"type": "builtin"},)
    out_dir: str | None = None

    def __post_init__(self):
        if not self.horizons:
            raise ConfigurationError("horizons list must be nonempty")
        for mode in self.modes:
            if mode not in MODES:
                raise ConfigurationError(f"unknown mode {mode!r}; known: {MODES}")
        for name in self.forecasters:
            if name not in forecast.FORECASTERS:
                raise ConfigurationError(
                    f"unknown forecaster {name!r}; known: {sorted(forecast.FORECASTERS)}"
                )
        if self.sign_policy not in geometry.SIGN_POLICIES:
            raise ConfigurationError(f"unknown sign policy {self.sign_policy!r}")
        if self.epochs < 1:
            raise ConfigurationError("epochs must be positive")

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        raw = dict(raw)
        if "mode" in raw and "modes" not in raw:
            raw["modes"] = [raw.pop("mode")]
        for key in ("horizons", "forecasters", "modes", "providers"):
            if key in raw:
                raw[key] = tuple(dict(v) if isinstance(v, dict) else v for v in raw[key])
        if "sampler" in raw and isinstance(raw["sampler"], dict):
            raw["sampler"] = rectflow.SamplerConfig(**raw["sampler"])
        if "train" in raw and isinstance(raw["train"], dict):
            raw["train"] = forecast.TrainConfig(**raw["train"])
        if "velocity" in raw and isinstance(raw["velocity"], dict):
            raw["velocity"] = rectflow.VelocityModelConfig(**raw["velocity"])
        known = set(cls.__dataclass_fields__)
        unknown = set(raw) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**raw)

    def to_dict(self) -> dict:
        payload = asdict(self)
        payload["sampler"] = self.sampler.to_json()
        payload["train"] = asdict(self.train)
        payload["velocity"] = asdict(self.velocity)
        return payload


def load_dataset(spec: dict) -> TimeSeriesDataset:
    spec = dict(spec)
    name = spec.get("name", "series")
    frequency = spec.get("frequency", "unknown")
    period = spec.get("period")
    if "values" in spec:
        return TimeSeriesDataset(
            np.asarray(spec["values"], dtype=float), name=name, frequency=frequency, period=period
        )
    if "path" in spec:
        return load_series(
            spec["path"], name=name, frequency=frequency, period=period, column=spec.get("column")
        )
    raise ConfigurationError("dataset spec needs either 'values' or 'path'")


@dataclass
class GeneratedSample:
    batch_index: int
    window_index: int
    x0: np.ndarray
    condition_vector: np.ndarray
    provider_id: str
    matrix: np.ndarray  # blended 2x2 endpoint
    window: np.ndarray  # decoded, length input_len + horizon
    loss: float | None = None


@dataclass
class RunState:
    mode: str
    input_len: int
    horizon: int
    forecaster: forecast.Forecaster
    velocity: rectflow.VelocityModel
    gate: conditioner.MoeGate
    selector: selector_mod.SelectorParams
    registry: conditioner.ProviderRegistry
    opt_psi: torch.optim.Optimizer
    opt_theta: torch.optim.Optimizer
    opt_phi: torch.optim.Optimizer
    reward: selector_mod.RewardState
    batches: list
    encoded: list  # per batch: (PcaState, [GeometricSample])
    provider_embs: list  # per batch: (B, n_providers, 512)
    val_half_batches: list
    val_windows: np.ndarray
    sampler: rectflow.SamplerConfig
    sign_policy: str
    cfg_per_step: bool
    reward_val_batches: int | None
    seed: int
    cell_key: str
    buffers: list = field(default_factory=list)  # per batch: [GeneratedSample]
    epoch: int = 0


def _batch_conditions(
    gate: conditioner.MoeGate,
    registry: conditioner.ProviderRegistry,
    inputs: np.ndarray,
    embs: np.ndarray,
) -> list[conditioner.Condition]:
    """Hard top-1 routing over cached provider embeddings for one batch."""
    ids = [p.provider_id for p in registry.ordered()]
    logits = gate(to_tensor(inputs))
    scores = torch.softmax(logits, dim=-1)
    picks = logits.detach().numpy().argmax(axis=1)
    out = []
    for i, k in enumerate(picks):
        frozen = to_tensor(embs[i, k])
        grad_vector = frozen * (scores[i, k] / scores[i, k].detach())
        out.append(
            conditioner.Condition(
                vector=embs[i, k], provider_id=ids[k], is_null=False, grad_vector=grad_vector
            )
        )
    return out


def build_providers(specs, input_len: int) -> conditioner.ProviderRegistry:
    registry = conditioner.ProviderRegistry()
    for raw in specs:
        kind = raw.get("type", "builtin")
        if kind == "builtin":
            registry.register(
                conditioner.RandomProjectionProvider(
                    input_len, provider_id=raw.get("id", "builtin"), seed=raw.get("seed", 7)
                )
            )
        elif kind == "executable":
            registry.register(
                conditioner.ExecutableProvider(
                    raw["id"], raw["path"], cache_dir=raw.get("cache_dir")
                )
            )
        else:
            raise ConfigurationError(f"unknown provider type {kind!r}")
    return registry


def warmup_baseline_loss(
    model: forecast.Forecaster,
    train_batches: list,
    val_half_batches: list,
    opt: torch.optim.Optimizer,
    seed: int,
) -> float:
    """One epoch on the training windows, then the mean latter-half
    validation MSE; the forecaster is reinitialized afterwards."""
    if not val_half_batches:
        raise ContractError("warm-up needs a nonempty latter-half validation split")
    for batch in train_batches:
        model.train_batch(batch.inputs, batch.targets, opt)
    losses = [
        forecast.mse_over_windows(model, b.windows, model.input_len) for b in val_half_batches
    ]
    base = float(np.mean(losses))
    model.reinitialize(seed)
    return base


def _generate_buffer_batch(state: RunState, b: int) -> list[GeneratedSample]:
    batch: WindowBatch = state.batches[b]
    pca, _samples = state.encoded[b]
    conds = _batch_conditions(state.gate, state.registry, batch.inputs, state.provider_embs[b])
    entries = []
    for i in range(len(batch)):
        rng = derive_rng(state.seed, state.cell_key, "gen", state.epoch, b, i)
        x0 = rng.standard_normal(rectflow.STATE_DIM)
        cond = conditioner.Condition(
            vector=conds[i].vector, provider_id=conds[i].provider_id, is_null=False
        )
        with torch.no_grad():
            blended = rectflow.cfg_sample_state(
                state.velocity, cond, state.sampler, x0=to_tensor(x0),
            )
        window = geometry.decode_sample(
            blended, pca, policy=state.sign_policy,
            paired=batch.windows[i] if state.sign_policy == "paired" else None,
        )
        entries.append(
            GeneratedSample(
                batch_index=b,
                window_index=i,
                x0=x0,
                condition_vector=np.array(conds[i].vector),
                provider_id=conds[i].provider_id,
                matrix=blended.detach().numpy(),
                window=np.asarray(window, dtype=float),
            )
        )
    return entries


def _regenerate_selected(state: RunState, b: int, indices) -> torch.Tensor:
    """Differentiable re-run of the selected samples' trajectories.

    Uses each sample's stored noise draw and condition with the current
    velocity model, keeping gradients through the sampler and the decoder.
    Returns the stacked generated windows.
    """
    batch: WindowBatch = state.batches[b]
    pca, _ = state.encoded[b]
    rows = []
    for i in indices:
        entry = state.buffers[b][i]
        cond = conditioner.Condition(
            vector=entry.condition_vector, provider_id=entry.provider_id, is_null=False
        )
        blended = rectflow.cfg_sample_state(
            state.velocity, cond, state.sampler, x0=to_tensor(entry.x0),
        )
        rows.append(
            geometry.decode_sample(
                blended, pca, policy=state.sign_policy,
                paired=batch.windows[i] if state.sign_policy == "paired" else None,
            )
        )
    return torch.stack(rows)


def _forced_decision(probs: torch.Tensor) -> selector_mod.SelectionDecision:
    ones = torch.ones_like(probs)
    log_prob = ones * torch.log(probs + selector_mod.EPS)
    return selector_mod.SelectionDecision(probs=probs, mask=ones, log_prob=log_prob)


def _val_half_losses(state: RunState) -> list[float]:
    batches = state.val_half_batches
    if state.reward_val_batches is not None:
        batches = batches[: state.reward_val_batches]
    return [
        forecast.mse_over_windows(state.forecaster, b.windows, state.input_len) for b in batches
    ]


def dvrlg_epoch(state: RunState) -> dict:
    """One joint epoch: diffusion training, regeneration, selection, updates."""
    state.epoch += 1
    log: dict = {"epoch": state.epoch}
    rf_rng = derive_rng(state.seed, state.cell_key, "rf", state.epoch)
    mask_rng = derive_rng(state.seed, state.cell_key, "mask", state.epoch)

    try:
        # Stage 1: velocity-field regression on the real geometric states.
        rf_losses = []
        for b, batch in enumerate(state.batches):
            _, samples = state.encoded[b]
            conds = _batch_conditions(
                state.gate, state.registry, batch.inputs, state.provider_embs[b]
            )
            loss = rectflow.rf_loss(state.velocity, samples, conds, rf_rng)
            state.opt_psi.zero_grad()
            loss.backward()
            state.opt_psi.step()
            rf_losses.append(float(loss.detach()))
        log["rf_loss"] = float(np.mean(rf_losses))

        # Regenerate buffers (frozen after epoch 1 in the once ablation).
        if not (state.mode == "dad4ts_once" and state.epoch >= 2 and state.buffers):
            state.buffers = [_generate_buffer_batch(state, b) for b in range(len(state.batches))]

        # Per-sample forecaster loss over every buffered sample.
        for entries in state.buffers:
            x_gen = np.stack([e.window[: state.input_len] for e in entries])
            y_gen = np.stack([e.window[state.input_len :] for e in entries])
            preds = state.forecaster.predict(x_gen)
            for e, pred, target in zip(entries, preds, y_gen):
                e.loss = float(np.mean((pred - target) ** 2))
        log["gen_loss"] = float(np.mean([e.loss for es in state.buffers for e in es]))

        probs_seen, selected_frac, ls_values, ltrain_values, rewards, phi_losses = (
            [], [], [], [], [], []
        )
        for b, batch in enumerate(state.batches):
            entries = state.buffers[b]
            x_gen = np.stack([e.window[: state.input_len] for e in entries])
            y_gen = np.stack([e.window[state.input_len :] for e in entries])
            gen_losses = [e.loss for e in entries]

            probs = selector_mod.score_samples(state.selector, x_gen, y_gen, gen_losses)
            if state.mode == "dad4ts_no_selector":
                decision = _forced_decision(probs)
            else:
                decision = selector_mod.draw_mask(probs, mask_rng)
            picked = decision.selected_indices()

            # Selected loss, differentiable through sampler and decoder.
            if picked.size:
                gen_windows = _regenerate_selected(state, b, picked)
                pred_gen = state.forecaster(gen_windows[:, : state.input_len])
                loss_sel = torch.mean((pred_gen - gen_windows[:, state.input_len :]) ** 2)
            else:
                loss_sel = torch.zeros((), dtype=DTYPE)

            pred_real = state.forecaster(to_tensor(batch.inputs))
            loss_real = torch.mean((pred_real - to_tensor(batch.targets)) ** 2)

            state.opt_psi.zero_grad()
            state.opt_theta.zero_grad()
            if loss_sel.requires_grad:
                loss_sel.backward()
            loss_real.backward()
            state.opt_psi.step()
            state.opt_theta.step()

            val_losses = _val_half_losses(state)
            reward = selector_mod.compute_reward(state.reward, val_losses, decision.mask_mean)
            if state.mode != "dad4ts_no_selector":
                phi_losses.append(
                    selector_mod.selector_update(
                        state.selector, decision, reward, gen_losses, state.opt_phi
                    )
                )

            probs_seen.append(float(decision.probs.detach().mean()))
            selected_frac.append(decision.mask_mean)
            ls_values.append(float(loss_sel.detach()))
            ltrain_values.append(float(loss_real.detach()))
            rewards.append(reward)

        log.update(
            mean_prob=float(np.mean(probs_seen)),
            selected_fraction=float(np.mean(selected_frac)),
            loss_selected=float(np.mean(ls_values)),
            loss_train=float(np.mean(ltrain_values)),
            reward=float(np.mean(rewards)),
            reward_ema=state.reward.ema,
            selector_loss=float(np.mean(phi_losses)) if phi_losses else 0.0,
        )
        log["val_loss"] = forecast.mse_over_windows(
            state.forecaster, state.val_windows, state.input_len
        )
    except DivergenceError as exc:
        log["aborted"] = {"step": exc.step, "reason": str(exc)}
    return log


def _stack_windows(batches: list) -> np.ndarray:
    return np.concatenate([b.windows for b in batches], axis=0)


def _make_dvrl_state(
    cfg: ExperimentConfig,
    split: SplitDataset,
    forecaster_name: str,
    horizon: int,
    mode: str,
    cell_seed: int,
    cell_key: str,
) -> RunState:
    seed_torch(cell_seed, cell_key, "models")
    model = forecast.make_forecaster(
        forecaster_name, cfg.input_len, horizon, seed=cell_seed
    )
    with torch.random.fork_rng():
        torch.manual_seed(cell_seed)
        velocity = rectflow.VelocityModel(cfg.velocity)
        registry = build_providers(cfg.providers, cfg.input_len)
        gate = conditioner.MoeGate(cfg.input_len, len(registry), hidden=cfg.gate_hidden)
        scorer = selector_mod.SelectorParams()
    opt_psi = torch.optim.AdamW(
        list(velocity.parameters()) + list(gate.parameters()),
        lr=cfg.velocity_lr,
        weight_decay=cfg.velocity_weight_decay,
    )
    train_cfg = forecast.TrainConfig(
        lr=cfg.train.lr,
        weight_decay=cfg.train.weight_decay,
        max_epochs=cfg.train.max_epochs,
        patience=cfg.train.patience,
        batch_size=cfg.batch_size,
        seed=cell_seed,
    )
    opt_theta = model.make_optimizer(train_cfg)
    opt_phi = selector_mod.make_selector_optimizer(scorer, lr=cfg.selector_lr)

    batches = list(
        window_batches(split.train, cfg.input_len, horizon, cfg.batch_size, "train")
    )
    encoded = [
        geometry.encode_batch(b.windows, source_batch_id=f"{cell_key}/b{i}")
        for i, b in enumerate(batches)
    ]
    providers = registry.ordered()
    provider_embs = [
        np.stack([[p.embed(w) for p in providers] for w in b.inputs]) for b in batches
    ]
    val_half_batches = list(
        window_batches(split.val_half(), cfg.input_len, horizon, cfg.batch_size, "val_half")
    )
    val_windows = _stack_windows(
        list(window_batches(split.val, cfg.input_len, horizon, cfg.batch_size, "val"))
    )
    sampler = cfg.sampler
    if cfg.cfg_per_step:
        sampler = rectflow.SamplerConfig(
            steps=cfg.sampler.steps,
            guidance_weight=cfg.sampler.guidance_weight,
            t_start=cfg.sampler.t_start,
            per_step_guidance=True,
        )

    warm_base = warmup_baseline_loss(model, batches, val_half_batches, opt_theta, cell_seed)
    # The warm-up consumed optimizer state; the joint loop starts fresh.
    opt_theta = model.make_optimizer(train_cfg)

    return RunState(
        mode=mode,
        input_len=cfg.input_len,
        horizon=horizon,
        forecaster=model,
        velocity=velocity,
        gate=gate,
        selector=scorer,
        registry=registry,
        opt_psi=opt_psi,
        opt_theta=opt_theta,
        opt_phi=opt_phi,
        reward=selector_mod.RewardState(base_loss=warm_base),
        batches=batches,
        encoded=encoded,
        provider_embs=provider_embs,
        val_half_batches=val_half_batches,
        val_windows=val_windows,
        sampler=sampler,
        sign_policy=cfg.sign_policy,
        cfg_per_step=cfg.cfg_per_step,
        reward_val_batches=cfg.reward_val_batches,
        seed=cell_seed,
        cell_key=cell_key,
    )


def _run_dvrl_cell(
    cfg: ExperimentConfig,
    split: SplitDataset,
    forecaster_name: str,
    horizon: int,
    mode: str,
    cell_seed: int,
    cell_key: str,
) -> tuple:
    state = _make_dvrl_state(cfg, split, forecaster_name, horizon, mode, cell_seed, cell_key)
    state.selector.train()
    epoch_logs = []
    best_val = float("inf")
    best_state = copy.deepcopy(state.forecaster.state_dict())
    for _ in range(cfg.epochs):
        log = dvrlg_epoch(state)
        epoch_logs.append(log)
        if "val_loss" in log and log["val_loss"] < best_val:
            best_val = log["val_loss"]
            best_state = copy.deepcopy(state.forecaster.state_dict())
    state.forecaster.load_state_dict(best_state)
    return state, epoch_logs


def _sample_dump(state: RunState) -> dict:
    """Arrays for the diagnostic plots: real vs generated windows,
    selection probabilities of the final epoch, and 2-d projections."""
    real = _stack_windows(state.batches)
    gen, probs, mask, gen_proj, real_proj = [], [], [], [], []
    mask_rng = derive_rng(state.seed, state.cell_key, "dump")
    state.selector.eval()
    for b, entries in enumerate(state.buffers):
        pca, samples = state.encoded[b]
        x_gen = np.stack([e.window[: state.input_len] for e in entries])
        y_gen = np.stack([e.window[state.input_len :] for e in entries])
        losses = [e.loss if e.loss is not None else 0.0 for e in entries]
        with torch.no_grad():
            p = selector_mod.score_samples(state.selector, x_gen, y_gen, losses)
        decision = selector_mod.draw_mask(p, mask_rng)
        probs.extend(p.numpy().tolist())
        mask.extend(decision.mask.numpy().tolist())
        for e, s in zip(entries, samples):
            gen.append(e.window)
            diag = np.abs(np.diag(0.5 * (e.matrix + e.matrix.T)))
            z_signs = np.asarray(s.signs)
            gen_proj.append(z_signs * np.sqrt(diag))
            real_proj.append(np.asarray(s.signs) * np.sqrt(np.diag(s.matrix)))
    return {
        "real_windows": real,
        "generated_windows": np.stack(gen) if gen else np.zeros((0, real.shape[1])),
        "probs": np.asarray(probs),
        "mask": np.asarray(mask),
        "generated_proj": np.stack(gen_proj) if gen_proj else np.zeros((0, 2)),
        "real_proj": np.stack(real_proj) if real_proj else np.zeros((0, 2)),
    }


def run_experiment(cfg: ExperimentConfig, artifacts_dir: str | Path | None = None) -> dict:
    """Run the full (forecaster x horizon x mode) grid and aggregate results.

    Configuration problems surface before any training starts. When an
    artifacts directory is given, the config snapshot, per-cell epoch logs,
    checkpoints, sample dumps, and the result table are written under it.
    """
    torch.set_num_threads(1)  # keep reductions bitwise reproducible
    ds = load_dataset(cfg.dataset)
    if "gaussian" in cfg.modes:
        period = cfg.dataset.get("period", ds.period)
        if period is None:
            raise ConfigurationError(
                "gaussian mode needs a seasonal period (dataset frequency unknown)"
            )
    for horizon in cfg.horizons:
        if horizon < 1:
            raise ConfigurationError("horizons must be positive")
    # Fail early if any horizon cannot form windows.
    probe_split = split_normalize(ds, cfg.input_len)
    for horizon in cfg.horizons:
        for seq in (probe_split.train, probe_split.val, probe_split.test, probe_split.val_half()):
            if seq.size - (cfg.input_len + horizon) + 1 < 2:
                raise ConfigurationError(
                    f"dataset {ds.name!r} too short for horizon {horizon} windows"
                )

    root = Path(artifacts_dir) if artifacts_dir else None
    if root is not None:
        root.mkdir(parents=True, exist_ok=True)

    cells = []
    epoch_log_index = {}
    for forecaster_name in cfg.forecasters:
        for horizon in cfg.horizons:
            split = split_normalize(ds, cfg.input_len)
            test_windows = _stack_windows(
                list(window_batches(split.test, cfg.input_len, horizon, cfg.batch_size, "test"))
            )
            val_windows = _stack_windows(
                list(window_batches(split.val, cfg.input_len, horizon, cfg.batch_size, "val"))
            )
            train_windows = _stack_windows(
                list(window_batches(split.train, cfg.input_len, horizon, cfg.batch_size, "train"))
            )
            for mode in cfg.modes:
                cell_key = f"{forecaster_name}_h{horizon}_{mode}"
                cell_seed = int(
                    (cfg.seed + stable_hash(ds.name, forecaster_name, horizon, mode)) % 2**31
                )
                cell_dir = root / "cells" / cell_key if root is not None else None
                if cell_dir is not None:
                    cell_dir.mkdir(parents=True, exist_ok=True)

                if mode in ("baseline", "gaussian"):
                    model = forecast.make_forecaster(
                        forecaster_name, cfg.input_len, horizon, seed=cell_seed
                    )
                    fit_windows = train_windows
                    if mode == "gaussian":
                        period = cfg.dataset.get("period", ds.period)
                        augmented = stl_gaussian_augment(
                            split.train, period, cfg.noise_scale, seed=cell_seed
                        )
                        aug_windows = _stack_windows(
                            list(
                                window_batches(
                                    augmented, cfg.input_len, horizon, cfg.batch_size, "aug"
                                )
                            )
                        )
                        fit_windows = np.concatenate([train_windows, aug_windows], axis=0)
                    train_cfg = forecast.TrainConfig(
                        lr=cfg.train.lr,
                        weight_decay=cfg.train.weight_decay,
                        max_epochs=cfg.train.max_epochs,
                        patience=cfg.train.patience,
                        batch_size=cfg.batch_size,
                        seed=cell_seed,
                    )
                    history = forecast.train_with_early_stopping(
                        model, fit_windows, val_windows, train_cfg
                    )
                    if cell_dir is not None:
                        _write_json(cell_dir / "epoch_log.json", history)
                    epoch_log_index[cell_key] = history
                else:
                    state, epoch_logs = _run_dvrl_cell(
                        cfg, split, forecaster_name, horizon, mode, cell_seed, cell_key
                    )
                    model = state.forecaster
                    epoch_log_index[cell_key] = epoch_logs
                    if cell_dir is not None:
                        _write_json(cell_dir / "epoch_log.json", epoch_logs)
                        dump = _sample_dump(state)
                        np.savez(cell_dir / "samples.npz", **dump)
                        save_params(
                            cell_dir / "checkpoint.npz",
                            {
                                "velocity": state.velocity,
                                "gate": state.gate,
                                "selector": state.selector,
                                "forecaster": state.forecaster,
                            },
                            meta={
                                "sampler": state.sampler.to_json(),
                                "mode": mode,
                                "cell": cell_key,
                            },
                        )
                        pca_states = [pca.to_json() for pca, _ in state.encoded]
                        _write_json(cell_dir / "pca_states.json", pca_states)

                scores = forecast.evaluate_split(model, test_windows, horizon)
                cells.append(
                    metrics.ResultCell(
                        dataset=ds.name,
                        forecaster=forecaster_name,
                        horizon=horizon,
                        mode=mode,
                        rmse=scores["rmse_mean"],
                        dtw=scores["dtw_mean"],
                    )
                )

    table = build_result_table(cells)
    if root is not None:
        _write_json(root / "config.json", cfg.to_dict())
        _write_json(root / "result_table.json", table)
        (root / "result_table.csv").write_text(result_table_csv(table))
    table["epoch_logs"] = epoch_log_index
    return table


def build_result_table(cells: list) -> dict:
    """Cells, horizon-averaged rows, and improvement summaries vs baseline."""
    table: dict = {"cells": [asdict(c) for c in cells]}
    combos = sorted({(c.forecaster, c.mode) for c in cells})
    averages = []
    for forecaster_name, mode in combos:
        group = [c for c in cells if c.forecaster == forecaster_name and c.mode == mode]
        averages.append(
            {
                "forecaster": forecaster_name,
                "mode": mode,
                "rmse": float(np.mean([c.rmse for c in group])),
                "dtw": float(np.mean([c.dtw for c in group])),
            }
        )
    table["averages"] = averages

    modes = sorted({c.mode for c in cells})
    improvement = {}
    if "baseline" in modes:
        base_cells = {
            (c.forecaster, c.horizon): c for c in cells if c.mode == "baseline"
        }
        for mode in modes:
            if mode == "baseline":
                continue
            keys = sorted(
                (c.forecaster, c.horizon) for c in cells if c.mode == mode
            )
            if not all(k in base_cells for k in keys):
                continue
            mode_cells = {
                (c.forecaster, c.horizon): c for c in cells if c.mode == mode
            }
            base_grid, method_grid = [], []
            base_rmse, method_rmse, base_dtw, method_dtw = [], [], [], []
            for key in keys:
                base_grid.extend([base_cells[key].rmse, base_cells[key].dtw])
                method_grid.extend([mode_cells[key].rmse, mode_cells[key].dtw])
                base_rmse.append(base_cells[key].rmse)
                method_rmse.append(mode_cells[key].rmse)
                base_dtw.append(base_cells[key].dtw)
                method_dtw.append(mode_cells[key].dtw)
            pooled = metrics.improvement_stats(base_grid, method_grid)
            improvement[mode] = {
                "imp_rate": pooled["imp_rate"],
                "imp_mean": pooled["imp_mean"],
                "delta_pct": pooled["delta_pct"].tolist(),
                "rmse": _imp_summary(base_rmse, method_rmse),
                "dtw": _imp_summary(base_dtw, method_dtw),
            }
    table["improvement"] = improvement
    return table


def _imp_summary(base: list, method: list) -> dict:
    stats = metrics.improvement_stats(base, method)
    return {
        "imp_rate": stats["imp_rate"],
        "imp_mean": stats["imp_mean"],
        "delta_pct": stats["delta_pct"].tolist(),
    }


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def result_table_csv(table: dict) -> str:
    lines = ["dataset,forecaster,horizon,mode,rmse,dtw"]
    for cell in table["cells"]:
        lines.append(
            f"{cell['dataset']},{cell['forecaster']},{cell['horizon']},"
            f"{cell['mode']},{cell['rmse']!r},{cell['dtw']!r}"
        )
    return "\n".join(lines) + "\n"
