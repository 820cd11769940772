"""Command-line entry point for every pipeline stage.

Subcommands: train-model, eval-likelihood, generate, env, train-agent,
eval-agent, gradcheck. Every run writes a manifest echoing its full
effective configuration; re-running with the manifest as config reproduces
the outputs byte-exactly (no timestamps are written).

Exit codes: 0 success, 1 check failure, 2 config error, 3 artifact mismatch.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys

import numpy as np

from .config import (ConfigError, get_bool, get_float, get_int, get_list,
                     get_str, parse_config, write_config)
from .data import MultimodalDataset, load_mnist_pair, make_synthetic_bars
from .envs import HyperhotConfig, HyperhotEnv, PendulumConfig, PendulumEnv, write_pgm
from . import checks
from . import likelihood as lik
from .model import (ModalitySpec, MuseModel, TrainConfig, VARIANTS,
                    load_checkpoint, save_checkpoint)
from .rl import (DdpgAgent, DdpgConfig, DqnAgent, DqnConfig, ObservationAdapter,
                 train_ddpg, train_dqn, zero_shot_eval)
from .rng import make_rng

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_ARTIFACT = 3


class ArtifactError(RuntimeError):
    pass


# -- dataset / model assembly -------------------------------------------

_DATA_DEFAULTS = {
    "synthetic_bars": {
        "data.count": "2000", "data.image_size": "16",
        "data.noise_sd": "0.01", "data.seed": "0",
    },
    "mnist": {"data.limit": "10000"},
}

_MODALITY_DEFAULTS = {
    "synthetic_bars": {
        "modality.image.likelihood": "bernoulli",
        "modality.image.latent_dim": "16",
        "modality.image.lam": "1.0",
        "modality.image.alpha": "1.0",
        "modality.image.gamma": "10.0",
        "modality.image.widths": "128,128",
        "modality.image.activation": "swish",
        "modality.angle.likelihood": "gaussian",
        "modality.angle.latent_dim": "4",
        "modality.angle.lam": "50.0",
        "modality.angle.alpha": "1.0",
        "modality.angle.gamma": "10.0",
        "modality.angle.widths": "64,64",
        "modality.angle.activation": "relu",
    },
    "mnist": {
        "modality.image.likelihood": "bernoulli",
        "modality.image.latent_dim": "50",
        "modality.image.lam": "1.0",
        "modality.image.alpha": "1.0",
        "modality.image.gamma": "10.0",
        "modality.image.widths": "512,512",
        "modality.image.activation": "swish",
        "modality.label.likelihood": "categorical",
        "modality.label.latent_dim": "4",
        "modality.label.lam": "50.0",
        "modality.label.alpha": "1.0",
        "modality.label.gamma": "10.0",
        "modality.label.widths": "64,64",
        "modality.label.activation": "relu",
    },
}

_MODEL_DEFAULTS = {
    "model.variant": "muse",
    "model.top_latent_dim": "10",
    "model.beta": "1.0",
    "model.delta": "1.0",
    "model.top_widths": "128,128",
    "train.epochs": "20",
    "train.batch_size": "64",
    "train.learning_rate": "1e-3",
}


def _resolve(cfg: dict, seed: int, out_dir: str, command: str) -> dict:
    kind = get_str(cfg, "data.kind", "synthetic_bars")
    if kind not in _DATA_DEFAULTS:
        raise ConfigError(f"config key 'data.kind': unknown dataset '{kind}'")
    effective = dict(_MODEL_DEFAULTS)
    effective.update(_DATA_DEFAULTS[kind])
    effective.update(_MODALITY_DEFAULTS[kind])
    effective["data.kind"] = kind
    effective.update(cfg)
    effective["run.command"] = command
    effective["run.seed"] = str(seed)
    if effective.get("model.variant") not in VARIANTS:
        raise ConfigError(
            f"config key 'model.variant': unknown variant "
            f"'{effective.get('model.variant')}'")
    return effective


def _load_dataset(cfg: dict) -> MultimodalDataset:
    kind = cfg["data.kind"]
    if kind == "synthetic_bars":
        return make_synthetic_bars(
            get_int(cfg, "data.count"), get_int(cfg, "data.image_size"),
            get_float(cfg, "data.noise_sd"), get_int(cfg, "data.seed"))
    image_path = get_str(cfg, "data.image_path")
    label_path = get_str(cfg, "data.label_path")
    for path in (image_path, label_path):
        if not os.path.exists(path):
            raise ConfigError(f"config key 'data.image_path'/'data.label_path': "
                              f"file not found: {path}")
    return load_mnist_pair(image_path, label_path, get_int(cfg, "data.limit"))


def _modality_specs(cfg: dict, dataset: MultimodalDataset) -> list[ModalitySpec]:
    specs = []
    for name in dataset.names():
        prefix = f"modality.{name}"
        widths = tuple(int(w) for w in get_list(cfg, f"{prefix}.widths"))
        specs.append(ModalitySpec(
            name=name,
            data_dim=dataset.modalities[name].shape[1],
            likelihood=get_str(cfg, f"{prefix}.likelihood"),
            latent_dim=get_int(cfg, f"{prefix}.latent_dim"),
            lam=get_float(cfg, f"{prefix}.lam"),
            alpha=get_float(cfg, f"{prefix}.alpha"),
            gamma=get_float(cfg, f"{prefix}.gamma"),
            enc_widths=widths, dec_widths=widths,
            activation=get_str(cfg, f"{prefix}.activation"),
        ))
    return specs


def _build_model(cfg: dict, dataset: MultimodalDataset, seed: int) -> MuseModel:
    return MuseModel(
        _modality_specs(cfg, dataset),
        top_latent_dim=get_int(cfg, "model.top_latent_dim"),
        beta=get_float(cfg, "model.beta"),
        delta=get_float(cfg, "model.delta"),
        variant=get_str(cfg, "model.variant"),
        top_widths=tuple(int(w) for w in get_list(cfg, "model.top_widths")),
        seed=seed,
    )


def _write_csv(path, fieldnames, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)


def _prepare_out(out_dir: str, effective: dict) -> None:
    os.makedirs(out_dir, exist_ok=True)
    write_config(os.path.join(out_dir, "manifest.cfg"), effective)


# -- subcommands ---------------------------------------------------------


def cmd_train_model(cfg: dict, seed: int, out_dir: str) -> int:
    effective = _resolve(cfg, seed, out_dir, "train-model")
    _prepare_out(out_dir, effective)
    dataset = _load_dataset(effective)
    model = _build_model(effective, dataset, seed)
    train_cfg = TrainConfig(
        epochs=get_int(effective, "train.epochs"),
        batch_size=get_int(effective, "train.batch_size"),
        learning_rate=get_float(effective, "train.learning_rate"),
        seed=seed,
    )
    log = model.fit(dataset, train_cfg)
    save_checkpoint(model, os.path.join(out_dir, "checkpoint"))
    _write_csv(os.path.join(out_dir, "loss.csv"),
               ["epoch", "bottom", "top", "alma", "total"],
               [{k: f"{v:.10g}" if k != "epoch" else v for k, v in row.items()}
                for row in log])
    if log:
        print(f"final loss {log[-1]['total']:.4f} after {len(log)} epochs")
    return EXIT_OK


def _load_model_checkpoint(effective: dict) -> MuseModel:
    prefix = get_str(effective, "eval.checkpoint")
    if not os.path.exists(prefix + ".pst"):
        raise ArtifactError(f"checkpoint not found: {prefix}.pst")
    return load_checkpoint(prefix)


def cmd_eval_likelihood(cfg: dict, seed: int, out_dir: str) -> int:
    effective = _resolve(cfg, seed, out_dir, "eval-likelihood")
    _prepare_out(out_dir, effective)
    model = _load_model_checkpoint(effective)
    dataset = _load_dataset(effective)
    limit = get_int(effective, "eval.limit", 100)
    dataset = dataset.subset(np.arange(min(limit, len(dataset))))
    n = get_int(effective, "eval.n_importance", 1000)
    if n < 1:
        raise ConfigError("config key 'eval.n_importance': must be >= 1")
    names = [s.name for s in model.modalities]
    rows = []

    def add(metric, modality, est):
        rows.append({"metric": metric, "modality": modality, "N": n,
                     "value": f"{est.value:.10g}", "stderr": f"{est.stderr:.10g}",
                     "seed": seed})

    if model.hierarchical:
        for name in names:
            add("marginal", name, lik.iw_marginal(model, name, dataset, n, seed))
    add("joint", "+".join(names), lik.iw_joint(model, dataset, n, seed))
    for target in names:
        sources = [m for m in names if m != target]
        if sources:
            add("conditional", f"{target}|{'+'.join(sources)}",
                lik.iw_conditional(model, target, sources, dataset, n, seed))
    _write_csv(os.path.join(out_dir, "metrics.csv"),
               ["metric", "modality", "N", "value", "stderr", "seed"], rows)
    for row in rows:
        print(f"{row['metric']:<12} {row['modality']:<16} {row['value']}")
    return EXIT_OK


def cmd_generate(cfg: dict, seed: int, out_dir: str) -> int:
    effective = _resolve(cfg, seed, out_dir, "generate")
    _prepare_out(out_dir, effective)
    model = _load_model_checkpoint(effective)
    dataset = _load_dataset(effective)
    sources = get_list(effective, "generate.sources")
    if not sources:
        raise ConfigError("config key 'generate.sources': must be non-empty")
    target = get_str(effective, "generate.target")
    known = [s.name for s in model.modalities]
    for name in sources + [target]:
        if name not in known:
            raise ConfigError(f"config key 'generate.sources/target': "
                              f"unknown modality '{name}'")
    count = get_int(effective, "generate.count", 8)
    rng = make_rng(seed, 0x6E4)
    idx = rng.choice(len(dataset), size=count, replace=False)
    src = {name: dataset.modalities[name][idx] for name in sources}
    generated = model.cross_modal_generate(src, target, mode="deterministic")
    shape = dataset.meta.get("image_shape") if target == "image" else None
    for i in range(count):
        if shape is not None:
            write_pgm(os.path.join(out_dir, f"sample_{i}_{target}.pgm"),
                      generated[i].reshape(shape))
        else:
            with open(os.path.join(out_dir, f"sample_{i}_{target}.csv"), "w",
                      encoding="utf-8") as fh:
                fh.write(",".join(f"{v:.10g}" for v in generated[i]) + "\n")
    print(f"wrote {count} '{target}' samples from {sources}")
    return EXIT_OK


def _make_env(effective: dict, seed: int):
    name = get_str(effective, "env.name")
    if name == "pendulum":
        return PendulumEnv(seed=seed)
    if name == "hyperhot":
        return HyperhotEnv(seed=seed)
    raise ConfigError(f"config key 'env.name': unknown environment '{name}'")


def cmd_env(cfg: dict, seed: int, out_dir: str) -> int:
    effective = _resolve(cfg, seed, out_dir, "env")
    _prepare_out(out_dir, effective)
    env = _make_env(effective, seed)
    steps = get_int(effective, "env.steps", 10)
    actions = get_list(effective, "env.actions", "")
    rng = make_rng(seed, 0xE4)
    obs = env.reset()
    sound_rows, reward_rows = [], []
    write_pgm(os.path.join(out_dir, "frame_000.pgm"), obs.image)
    for i in range(steps):
        if actions:
            raw = actions[i % len(actions)]
            action = float(raw) if isinstance(env, PendulumEnv) else int(raw)
        elif isinstance(env, PendulumEnv):
            action = float(rng.uniform(-2.0, 2.0))
        else:
            action = int(rng.integers(env.n_actions))
        obs, reward, done = env.step(action)
        write_pgm(os.path.join(out_dir, f"frame_{i + 1:03d}.pgm"), obs.image)
        sound_rows.append({"step": i, **{f"s{j}": f"{v:.10g}"
                                         for j, v in enumerate(obs.sound)}})
        reward_rows.append({"step": i, "reward": f"{reward:.10g}",
                            "done": int(done)})
        if done:
            break
    if isinstance(env, HyperhotEnv):
        waves = env.waveforms()
        with open(os.path.join(out_dir, "waveform.csv"), "w",
                  encoding="utf-8") as fh:
            for row in waves:
                fh.write(",".join(str(int(v)) for v in row) + "\n")
    _write_csv(os.path.join(out_dir, "sound.csv"),
               list(sound_rows[0].keys()), sound_rows)
    _write_csv(os.path.join(out_dir, "rewards.csv"),
               ["step", "reward", "done"], reward_rows)
    print(f"rolled out {len(reward_rows)} steps")
    return EXIT_OK


def _make_adapter(effective: dict, env) -> ObservationAdapter:
    kind = get_str(effective, "agent.adapter", "raw_fusion")
    if kind.endswith("latent"):
        prefix = get_str(effective, "agent.model_checkpoint", "")
        if not prefix or not os.path.exists(prefix + ".pst"):
            raise ArtifactError(
                f"latent adapter '{kind}' needs agent.model_checkpoint")
        model = load_checkpoint(prefix)
        return ObservationAdapter(kind, model=model)
    dims = {"image": env.cfg.image_size ** 2, "sound": env.sound_dim}
    return ObservationAdapter(kind, modality_dims=dims)


def cmd_train_agent(cfg: dict, seed: int, out_dir: str) -> int:
    effective = _resolve(cfg, seed, out_dir, "train-agent")
    _prepare_out(out_dir, effective)
    env = _make_env(effective, seed)
    adapter = _make_adapter(effective, env)
    algo = get_str(effective, "agent.algorithm",
                   "ddpg" if isinstance(env, PendulumEnv) else "dqn")
    steps = get_int(effective, "agent.steps", 100_000)
    if algo == "ddpg":
        agent, curve = train_ddpg(env, adapter, DdpgConfig(steps=steps, seed=seed))
        agent.actor.save(os.path.join(out_dir, "policy.pst"))
        agent.critic.save(os.path.join(out_dir, "critic.pst"))
    elif algo == "dqn":
        agent, curve = train_dqn(env, adapter, DqnConfig(steps=steps, seed=seed))
        agent.params.save(os.path.join(out_dir, "policy.pst"))
    else:
        raise ConfigError(f"config key 'agent.algorithm': unknown '{algo}'")
    meta = {
        "agent.algorithm": algo,
        "agent.adapter": get_str(effective, "agent.adapter", "raw_fusion"),
        "agent.obs_dim": str(adapter.dim()),
        "agent.model_checkpoint": get_str(effective, "agent.model_checkpoint", "-"),
        "env.name": get_str(effective, "env.name"),
        "run.seed": str(seed),
    }
    write_config(os.path.join(out_dir, "policy.meta"), meta)
    _write_csv(os.path.join(out_dir, "curve.csv"), ["episode", "step", "reward"],
               [{"episode": c["episode"], "step": c["step"],
                 "reward": f"{c['reward']:.10g}"} for c in curve])
    if curve:
        print(f"trained {algo} for {steps} steps, "
              f"last episode reward {curve[-1]['reward']:.3f}")
    return EXIT_OK


_MASKS = {
    "joint": {"image": True, "sound": True},
    "image-only": {"image": True, "sound": False},
    "sound-only": {"image": False, "sound": True},
}


def load_policy(policy_dir: str):
    """Rebuild a trained agent + adapter from a train-agent output directory."""
    meta = parse_config(os.path.join(policy_dir, "policy.meta"))
    algo = meta["agent.algorithm"]
    obs_dim = int(meta["agent.obs_dim"])
    kind = meta["agent.adapter"]
    env_name = meta["env.name"]
    env = PendulumEnv() if env_name == "pendulum" else HyperhotEnv()
    if kind.endswith("latent"):
        model = load_checkpoint(meta["agent.model_checkpoint"])
        adapter = ObservationAdapter(kind, model=model)
    else:
        dims = {"image": env.cfg.image_size ** 2, "sound": env.sound_dim}
        adapter = ObservationAdapter(kind, modality_dims=dims)
    from .autodiff import ParamStore
    if algo == "ddpg":
        agent = DdpgAgent(obs_dim, 1, DdpgConfig())
        agent.actor = ParamStore.load(os.path.join(policy_dir, "policy.pst"))
    else:
        agent = DqnAgent(obs_dim, env.n_actions, DqnConfig())
        agent.params = ParamStore.load(os.path.join(policy_dir, "policy.pst"))
    return agent, adapter, env


def cmd_eval_agent(cfg: dict, seed: int, out_dir: str) -> int:
    effective = _resolve(cfg, seed, out_dir, "eval-agent")
    _prepare_out(out_dir, effective)
    policy_dir = get_str(effective, "eval.policy_dir")
    if not os.path.exists(os.path.join(policy_dir, "policy.meta")):
        raise ArtifactError(f"policy not found in {policy_dir}")
    agent, adapter, env = load_policy(policy_dir)
    episodes = get_int(effective, "eval.episodes", 10)
    mask_names = get_list(effective, "eval.masks", "joint,image-only,sound-only")
    for m in mask_names:
        if m not in _MASKS:
            raise ConfigError(f"config key 'eval.masks': unknown mask '{m}'")
    seeds = [int(s) for s in get_list(effective, "eval.seeds", str(seed))]
    agent_kind = parse_config(os.path.join(policy_dir, "policy.meta"))["agent.adapter"]
    rows = []
    for mask_name in mask_names:
        for s in seeds:
            env.seed = s
            env._episode = 0
            for ep in range(episodes):
                mean, _ = zero_shot_eval(agent, adapter, env, _MASKS[mask_name],
                                         episodes=1, seed=split_seed(s, ep))
                rows.append({"agent_kind": agent_kind, "modality_mask": mask_name,
                             "seed": s, "episode": ep, "reward": f"{mean:.10g}"})
    _write_csv(os.path.join(out_dir, "zero_shot.csv"),
               ["agent_kind", "modality_mask", "seed", "episode", "reward"], rows)
    for mask_name in mask_names:
        vals = [float(r["reward"]) for r in rows if r["modality_mask"] == mask_name]
        print(f"{mask_name:<12} mean reward {np.mean(vals):.3f} "
              f"+/- {np.std(vals):.3f}")
    return EXIT_OK


def split_seed(seed: int, episode: int) -> int:
    from .rng import split
    return split(seed, 0xE9, episode)


def cmd_gradcheck(seed: int) -> int:
    results = checks.run_suite(seed=seed)
    any_failed = False
    for res in results:
        status = "PASS" if res.passed else "FAIL"
        print(f"{status}  {res.name:<28} max rel error {res.max_rel_error:.3e} "
              f"(tol {res.tolerance:.0e})")
        any_failed = any_failed or not res.passed
    return EXIT_CHECK_FAILED if any_failed else EXIT_OK


# -- entry ---------------------------------------------------------------


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="muse", description="multimodal representation learning pipeline")
    parser.add_argument("command", choices=[
        "train-model", "eval-likelihood", "generate", "env",
        "train-agent", "eval-agent", "gradcheck"])
    parser.add_argument("--config", default=None, help="structured-text config")
    parser.add_argument("--seed", type=int, default=None,
                        help="run seed (default: run.seed from config, else 0)")
    parser.add_argument("--out", default="out", help="output directory")
    args = parser.parse_args(argv)

    try:
        cfg = parse_config(args.config) if args.config else {}
    except FileNotFoundError:
        print(f"error: config file not found: {args.config}", file=sys.stderr)
        return EXIT_CONFIG
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    if args.seed is None:
        try:
            args.seed = int(cfg.get("run.seed", 0))
        except ValueError:
            print(f"error: config key 'run.seed': not an integer", file=sys.stderr)
            return EXIT_CONFIG

    try:
        if args.command == "train-model":
            return cmd_train_model(cfg, args.seed, args.out)
        if args.command == "eval-likelihood":
            return cmd_eval_likelihood(cfg, args.seed, args.out)
        if args.command == "generate":
            return cmd_generate(cfg, args.seed, args.out)
        if args.command == "env":
            return cmd_env(cfg, args.seed, args.out)
        if args.command == "train-agent":
            return cmd_train_agent(cfg, args.seed, args.out)
        if args.command == "eval-agent":
            return cmd_eval_agent(cfg, args.seed, args.out)
        if args.command == "gradcheck":
            return cmd_gradcheck(args.seed)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ArtifactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT
    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
