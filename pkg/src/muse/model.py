"""Two-level multimodal generative model with product-of-experts fusion.

The hierarchy trains modality-specific VAEs at the bottom and a shared
multimodal latent at the top, fused by a product of per-modality experts
over sampled low-level codes. An additional similarity term pulls every
partial-subset posterior toward the full posterior so that inference stays
usable when modalities go missing.

Variants implemented alongside the main model:
  * ``muse``       - the full hierarchical model with the similarity term;
  * ``muse_a``     - same hierarchy, similarity weight forced to zero;
  * ``muse_h``     - no bottom latents, experts read the raw inputs;
  * ``flat_mvae``  - single-level PoE trained with joint + singleton ELBOs;
  * ``fusion_vae`` - one VAE over the concatenated modalities.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, NumericError, ParamStore, Tensor
from .gaussians import (DiagGaussian, kl_between, kl_to_standard, log_pdf,
                        poe_combine, reparam_sample, symmetric_kl)
from .data import MultimodalDataset, batch_iter
from .rng import make_rng, split

__all__ = [
    "ModalitySpec",
    "TrainConfig",
    "MuseModel",
    "build_variant",
    "VARIANTS",
    "save_checkpoint",
    "load_checkpoint",
]

VARIANTS = ("muse", "muse_h", "muse_a", "flat_mvae", "fusion_vae")

LIKELIHOODS = ("bernoulli", "categorical", "gaussian")


@dataclass
class ModalitySpec:
    name: str
    data_dim: int
    likelihood: str = "bernoulli"
    latent_dim: int = 16
    lam: float = 1.0       # reconstruction weight
    alpha: float = 1.0     # bottom KL weight
    gamma: float = 10.0    # code reconstruction weight
    enc_widths: tuple = (128, 128)
    dec_widths: tuple = (128, 128)
    activation: str = "swish"

    def __post_init__(self):
        if self.likelihood not in LIKELIHOODS:
            raise ContractError(f"unknown likelihood '{self.likelihood}'")
        self.enc_widths = tuple(self.enc_widths)
        self.dec_widths = tuple(self.dec_widths)


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    learning_rate: float = 1e-3
    seed: int = 0
    shuffle: bool = True


_ACTS = {"swish": ad.swish, "relu": ad.relu, "tanh": ad.tanh}


def _glorot(rng, n_in, n_out):
    bound = np.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-bound, bound, size=(n_in, n_out))


def _init_mlp(params: ParamStore, rng, prefix: str, n_in: int, widths, n_out: int,
              n_heads: int = 1):
    dims = [n_in, *widths]
    for i in range(len(dims) - 1):
        params.create(f"{prefix}.W{i}", _glorot(rng, dims[i], dims[i + 1]))
        params.create(f"{prefix}.b{i}", np.zeros((1, dims[i + 1])))
    if n_heads == 1:
        params.create(f"{prefix}.Wout", _glorot(rng, dims[-1], n_out))
        params.create(f"{prefix}.bout", np.zeros((1, n_out)))
    else:
        for h in range(n_heads):
            params.create(f"{prefix}.Wout{h}", _glorot(rng, dims[-1], n_out))
            params.create(f"{prefix}.bout{h}", np.zeros((1, n_out)))


def _mlp(bound, prefix: str, x: Tensor, n_hidden: int, act) -> Tensor:
    h = x
    for i in range(n_hidden):
        h = act(ad.matmul(h, bound[f"{prefix}.W{i}"]) + bound[f"{prefix}.b{i}"])
    return h


def _mlp_head(bound, prefix: str, x: Tensor, n_hidden: int, act) -> Tensor:
    h = _mlp(bound, prefix, x, n_hidden, act)
    return ad.matmul(h, bound[f"{prefix}.Wout"]) + bound[f"{prefix}.bout"]


def _mlp_gaussian(bound, prefix: str, x: Tensor, n_hidden: int, act) -> DiagGaussian:
    h = _mlp(bound, prefix, x, n_hidden, act)
    mean = ad.matmul(h, bound[f"{prefix}.Wout0"]) + bound[f"{prefix}.bout0"]
    logvar = ad.matmul(h, bound[f"{prefix}.Wout1"]) + bound[f"{prefix}.bout1"]
    return DiagGaussian(mean, logvar)


def _recon_nll(likelihood: str, decoded: Tensor, x: Tensor) -> Tensor:
    """Per-sample negative log-likelihood, constants dropped for gaussian."""
    if likelihood == "bernoulli":
        # decoded are logits; softplus(l) - l*x is BCE summed over pixels
        return ad.sum_(ad.softplus(decoded) - decoded * x, axis=-1)
    if likelihood == "categorical":
        return -ad.sum_(x * ad.log_softmax(decoded), axis=-1)
    # unit-variance gaussian
    return 0.5 * ad.sum_(ad.square(decoded - x), axis=-1)


class MuseModel:
    """Hierarchical multimodal VAE plus its ablation/baseline variants."""

    def __init__(self, modalities: list[ModalitySpec], top_latent_dim: int = 10,
                 beta: float = 1.0, delta: float = 1.0, variant: str = "muse",
                 top_widths: tuple = (128, 128), seed: int = 0):
        if variant not in VARIANTS:
            raise ContractError(f"unknown variant '{variant}'")
        if variant == "muse_a":
            delta = 0.0
        self.modalities = list(modalities)
        self.top_latent_dim = int(top_latent_dim)
        self.beta = float(beta)
        self.delta = float(delta)
        self.variant = variant
        self.top_widths = tuple(top_widths)
        self.seed = int(seed)
        self.params = ParamStore()
        self._build(make_rng(seed, 0x10DE1))

    # -- construction ---------------------------------------------------

    @property
    def hierarchical(self) -> bool:
        return self.variant in ("muse", "muse_a")

    def spec(self, m) -> ModalitySpec:
        if isinstance(m, ModalitySpec):
            return m
        if isinstance(m, int):
            return self.modalities[m]
        for s in self.modalities:
            if s.name == m:
                return s
        raise ContractError(f"unknown modality '{m}'")

    def _build(self, rng):
        p = self.params
        zpi = self.top_latent_dim
        if self.variant == "fusion_vae":
            total = sum(s.data_dim for s in self.modalities)
            widths = self.modalities[0].enc_widths
            _init_mlp(p, rng, "fusion.enc", total, widths, zpi, n_heads=2)
            _init_mlp(p, rng, "fusion.dec", zpi,
                      self.modalities[0].dec_widths, total)
            return
        for s in self.modalities:
            if self.hierarchical:
                _init_mlp(p, rng, f"{s.name}.enc", s.data_dim, s.enc_widths,
                          s.latent_dim, n_heads=2)
                _init_mlp(p, rng, f"{s.name}.dec", s.latent_dim, s.dec_widths,
                          s.data_dim)
                _init_mlp(p, rng, f"{s.name}.top_enc", s.latent_dim,
                          self.top_widths, zpi, n_heads=2)
                _init_mlp(p, rng, f"{s.name}.top_dec", zpi, self.top_widths,
                          s.latent_dim)
            else:
                # muse_h / flat_mvae: experts straight over the raw modality
                _init_mlp(p, rng, f"{s.name}.top_enc", s.data_dim, s.enc_widths,
                          zpi, n_heads=2)
                _init_mlp(p, rng, f"{s.name}.top_dec", zpi, s.dec_widths,
                          s.data_dim)

    # -- encoding -------------------------------------------------------

    def encode_modality(self, m, x, bound=None) -> DiagGaussian:
        """Bottom posterior q(z_m | x_m); hierarchical variants only."""
        if not self.hierarchical:
            raise ContractError(f"variant '{self.variant}' has no bottom latents")
        s = self.spec(m)
        bound = bound or self.params.bind()
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.shape[-1] != s.data_dim:
            raise ContractError(
                f"modality '{s.name}' expects dim {s.data_dim}, got {x.shape[-1]}"
            )
        return _mlp_gaussian(bound, f"{s.name}.enc", x, len(s.enc_widths),
                             _ACTS[s.activation])

    def code_of(self, m, x, mode: str = "deterministic", rng=None, bound=None) -> Tensor:
        """Low-level code c_m: posterior sample while training, mean at test time."""
        q = self.encode_modality(m, x, bound=bound)
        if mode == "deterministic":
            return q.mean
        if mode == "sampled":
            if rng is None:
                raise ContractError("sampled mode needs an rng")
            noise = rng.standard_normal(q.mean.shape)
            return reparam_sample(q, noise)
        raise ContractError(f"unknown code mode '{mode}'")

    def _top_expert(self, m, code, bound) -> DiagGaussian:
        s = self.spec(m)
        code = code if isinstance(code, Tensor) else Tensor(code)
        act = _ACTS["relu"] if self.hierarchical else _ACTS[s.activation]
        n_hidden = len(self.top_widths) if self.hierarchical else len(s.enc_widths)
        return _mlp_gaussian(bound, f"{s.name}.top_enc", code, n_hidden, act)

    def encode_multimodal(self, codes: dict, bound=None, clamp_events=None) -> DiagGaussian:
        """PoE posterior over the available subset of codes; prior included.

        `codes` maps modality name to the low-level code (hierarchical
        variants) or the raw modality data (flat variants). An empty map
        returns the prior.
        """
        if self.variant == "fusion_vae":
            return self._fusion_encode(codes, bound=bound)
        bound = bound or self.params.bind()
        experts = [self._top_expert(name, code, bound)
                   for name, code in codes.items()]
        if not experts:
            shape = (self.top_latent_dim,)
            return DiagGaussian(np.zeros(shape), np.zeros(shape))
        return poe_combine(experts, include_standard_prior=True,
                           clamp_events=clamp_events)

    def _fusion_encode(self, data: dict, bound=None) -> DiagGaussian:
        """Concatenated-input encoder; missing modalities are zero-imputed."""
        bound = bound or self.params.bind()
        batch = None
        for v in data.values():
            arr = v.value if isinstance(v, Tensor) else np.asarray(v)
            batch = arr.shape[:-1]
            break
        if batch is None:
            raise ContractError("fusion encoder needs at least one modality")
        parts = []
        for s in self.modalities:
            if s.name in data:
                v = data[s.name]
                parts.append(v if isinstance(v, Tensor) else Tensor(v))
            else:
                parts.append(Tensor(np.zeros(batch + (s.data_dim,))))
        x = ad.concat(parts, axis=-1)
        return _mlp_gaussian(bound, "fusion.enc", x,
                             len(self.modalities[0].enc_widths),
                             _ACTS[self.modalities[0].activation])

    # -- decoding -------------------------------------------------------

    def decode_modality(self, m, z, bound=None) -> Tensor:
        """Bottom decoder output (raw: logits / log-probits / mean)."""
        if not self.hierarchical:
            raise ContractError(f"variant '{self.variant}' has no bottom decoders")
        s = self.spec(m)
        bound = bound or self.params.bind()
        z = z if isinstance(z, Tensor) else Tensor(z)
        return _mlp_head(bound, f"{s.name}.dec", z, len(s.dec_widths),
                         _ACTS[s.activation])

    def decode_top(self, m, z_pi, bound=None) -> Tensor:
        s = self.spec(m)
        bound = bound or self.params.bind()
        z_pi = z_pi if isinstance(z_pi, Tensor) else Tensor(z_pi)
        if self.variant == "fusion_vae":
            full = _mlp_head(bound, "fusion.dec", z_pi,
                             len(self.modalities[0].dec_widths),
                             _ACTS[self.modalities[0].activation])
            start = 0
            for t in self.modalities:
                if t.name == s.name:
                    return ad.slice_last(full, start, start + t.data_dim)
                start += t.data_dim
        act = _ACTS["relu"] if self.hierarchical else _ACTS[s.activation]
        n_hidden = len(self.top_widths) if self.hierarchical else len(s.dec_widths)
        return _mlp_head(bound, f"{s.name}.top_dec", z_pi, n_hidden, act)

    @staticmethod
    def output_probs(spec: ModalitySpec, decoded: np.ndarray) -> np.ndarray:
        """Map a raw decoder output to mean/probability space."""
        if spec.likelihood == "bernoulli":
            return 1.0 / (1.0 + np.exp(-decoded))
        if spec.likelihood == "categorical":
            shifted = decoded - decoded.max(axis=-1, keepdims=True)
            e = np.exp(shifted)
            return e / e.sum(axis=-1, keepdims=True)
        return decoded

    # -- losses ---------------------------------------------------------

    def loss_terms(self, batch: dict, rng, bound=None, frozen_codes=None) -> dict:
        """All loss terms on one shared set of sampled codes.

        Returns Tensors keyed 'bottom', 'top', 'alma', 'total' (batch means,
        minimization form). The codes feeding the top level are detached, so
        top/alma gradients never reach bottom parameters.

        `frozen_codes` replaces the detached codes with fixed constants
        (used by finite-difference checks, where the detach would otherwise
        make numeric and analytic derivatives legitimately disagree).
        """
        bound = bound or self.params.bind()
        if self.variant == "fusion_vae":
            return self._fusion_loss(batch, rng, bound)
        if not self.hierarchical:
            return self._flat_loss(batch, rng, bound)

        zero = Tensor(0.0)
        bottom_terms = []
        codes = {}
        for s in self.modalities:
            x = Tensor(batch[s.name])
            q = self.encode_modality(s, x, bound=bound)
            noise = rng.standard_normal(q.mean.shape)
            z = reparam_sample(q, noise)
            decoded = self.decode_modality(s, z, bound=bound)
            nll = _recon_nll(s.likelihood, decoded, x)
            bottom_terms.append(ad.mean_(s.lam * nll + s.alpha * kl_to_standard(q)))
            if frozen_codes is not None:
                codes[s.name] = Tensor(np.asarray(frozen_codes[s.name]))
            else:
                codes[s.name] = ad.stop_gradient(z)

        bottom = bottom_terms[0]
        for t in bottom_terms[1:]:
            bottom = bottom + t

        q_top = self.encode_multimodal(codes, bound=bound)
        noise = rng.standard_normal(q_top.mean.shape)
        z_pi = reparam_sample(q_top, noise)
        top = self.beta * ad.mean_(kl_to_standard(q_top))
        for s in self.modalities:
            c_hat = self.decode_top(s, z_pi, bound=bound)
            top = top + s.gamma * ad.mean_(
                0.5 * ad.sum_(ad.square(c_hat - codes[s.name]), axis=-1))

        alma = zero
        subsets = _strict_subsets([s.name for s in self.modalities])
        if subsets and self.delta > 0.0:
            acc = None
            for names in subsets:
                q_d = self.encode_multimodal(
                    {n: codes[n] for n in names}, bound=bound)
                term = ad.mean_(symmetric_kl(q_top, q_d))
                acc = term if acc is None else acc + term
            alma = (self.delta / len(subsets)) * acc

        total = bottom + top + alma
        self._check_terms(bottom=bottom, top=top, alma=alma)
        return {"bottom": bottom, "top": top, "alma": alma, "total": total}

    def _flat_loss(self, batch, rng, bound) -> dict:
        """muse_h and flat_mvae: experts over raw inputs, one level."""
        xs = {s.name: Tensor(batch[s.name]) for s in self.modalities}
        zero = Tensor(0.0)

        def elbo_loss(names):
            q = self.encode_multimodal({n: xs[n] for n in names}, bound=bound)
            noise = rng.standard_normal(q.mean.shape)
            z = reparam_sample(q, noise)
            loss = self.beta * ad.mean_(kl_to_standard(q))
            for n in names:
                s = self.spec(n)
                decoded = self.decode_top(s, z, bound=bound)
                loss = loss + s.lam * ad.mean_(
                    _recon_nll(s.likelihood, decoded, xs[n]))
            return loss, q

        all_names = [s.name for s in self.modalities]
        if self.variant == "muse_h":
            q_full = self.encode_multimodal(xs, bound=bound)
            noise = rng.standard_normal(q_full.mean.shape)
            z = reparam_sample(q_full, noise)
            top = self.beta * ad.mean_(kl_to_standard(q_full))
            for s in self.modalities:
                decoded = self.decode_top(s, z, bound=bound)
                top = top + s.lam * ad.mean_(
                    _recon_nll(s.likelihood, decoded, xs[s.name]))
            alma = zero
            subsets = _strict_subsets(all_names)
            if subsets and self.delta > 0.0:
                acc = None
                for names in subsets:
                    q_d = self.encode_multimodal(
                        {n: xs[n] for n in names}, bound=bound)
                    term = ad.mean_(symmetric_kl(q_full, q_d))
                    acc = term if acc is None else acc + term
                alma = (self.delta / len(subsets)) * acc
            total = top + alma
            self._check_terms(top=top, alma=alma)
            return {"bottom": zero, "top": top, "alma": alma, "total": total}

        # flat_mvae: joint ELBO plus every singleton ELBO
        top, _ = elbo_loss(all_names)
        for name in all_names:
            single, _ = elbo_loss([name])
            top = top + single
        self._check_terms(top=top)
        return {"bottom": zero, "top": top, "alma": zero, "total": top}

    def _fusion_loss(self, batch, rng, bound) -> dict:
        xs = {s.name: Tensor(batch[s.name]) for s in self.modalities}
        q = self._fusion_encode(xs, bound=bound)
        noise = rng.standard_normal(q.mean.shape)
        z = reparam_sample(q, noise)
        loss = self.beta * ad.mean_(kl_to_standard(q))
        for s in self.modalities:
            decoded = self.decode_top(s, z, bound=bound)
            loss = loss + s.lam * ad.mean_(
                _recon_nll(s.likelihood, decoded, xs[s.name]))
        zero = Tensor(0.0)
        self._check_terms(total=loss)
        return {"bottom": zero, "top": loss, "alma": zero, "total": loss}

    @staticmethod
    def _check_terms(**terms):
        for name, t in terms.items():
            if not np.all(np.isfinite(t.value)):
                raise NumericError(f"non-finite loss term '{name}'")

    def sample_codes(self, batch: dict, rng) -> dict:
        """Sampled codes for every modality, one posterior draw each."""
        return {s.name: self.code_of(s, batch[s.name], "sampled", rng=rng).value
                for s in self.modalities}

    def bottom_loss(self, batch, rng) -> float:
        return float(self.loss_terms(batch, rng)["bottom"].value)

    def top_loss(self, batch, rng) -> float:
        return float(self.loss_terms(batch, rng)["top"].value)

    def alma_term(self, batch, rng) -> float:
        return float(self.loss_terms(batch, rng)["alma"].value)

    def total_loss(self, batch, rng) -> dict:
        terms = self.loss_terms(batch, rng)
        return {k: float(v.value) for k, v in terms.items()}

    # -- training -------------------------------------------------------

    def fit(self, dataset: MultimodalDataset, config: TrainConfig) -> list[dict]:
        """Adam minimization of the total loss; returns the per-epoch log."""
        log = []
        last_good = self.params.copy()
        for epoch in range(config.epochs):
            rng = make_rng(config.seed, 0x7124, epoch)
            shuffle_seed = split(config.seed, 0x5E, epoch) if config.shuffle else None
            sums = {"bottom": 0.0, "top": 0.0, "alma": 0.0, "total": 0.0}
            n_batches = 0
            try:
                for batch in batch_iter(dataset, config.batch_size, shuffle_seed):
                    bound = self.params.bind()
                    terms = self.loss_terms(batch, rng, bound=bound)
                    terms["total"].backward()
                    grads = ParamStore.collect_grads(bound)
                    self.params.adam_step(grads, lr=config.learning_rate)
                    for k in sums:
                        sums[k] += float(terms[k].value)
                    n_batches += 1
            except NumericError:
                self.params = last_good
                raise
            last_good = self.params.copy()
            entry = {"epoch": epoch}
            entry.update({k: v / max(n_batches, 1) for k, v in sums.items()})
            log.append(entry)
        return log

    # -- generation -----------------------------------------------------

    def cross_modal_generate(self, sources: dict, target, mode: str = "deterministic",
                             rng=None) -> np.ndarray:
        """Generate the target modality from any non-empty set of sources."""
        if not sources:
            raise ContractError("sources must be non-empty; sample the prior instead")
        t_spec = self.spec(target)
        bound = self.params.bind()
        if self.variant == "fusion_vae":
            q = self._fusion_encode(sources, bound=bound)
        elif self.hierarchical:
            codes = {name: self.code_of(name, x, "deterministic", bound=bound)
                     for name, x in sources.items()}
            q = self.encode_multimodal(codes, bound=bound)
        else:
            q = self.encode_multimodal(sources, bound=bound)
        if mode == "deterministic":
            z_pi = q.mean
        else:
            if rng is None:
                raise ContractError("sampled mode needs an rng")
            z_pi = reparam_sample(q, rng.standard_normal(q.mean.shape))
        if self.hierarchical:
            c_hat = self.decode_top(t_spec, z_pi, bound=bound)
            decoded = self.decode_modality(t_spec, c_hat, bound=bound)
        else:
            decoded = self.decode_top(t_spec, z_pi, bound=bound)
        return self.output_probs(t_spec, decoded.value)


def _strict_subsets(names: list[str]) -> list[tuple]:
    """All non-empty strict subsets, in deterministic order."""
    out = []
    for r in range(1, len(names)):
        out.extend(itertools.combinations(names, r))
    return out


def build_variant(kind: str, modalities: list[ModalitySpec], **kwargs) -> MuseModel:
    if kind not in VARIANTS:
        raise ContractError(f"unknown variant '{kind}'")
    return MuseModel(modalities, variant=kind, **kwargs)


# -- checkpoint container -----------------------------------------------


def save_checkpoint(model: MuseModel, path_prefix: str) -> None:
    """ParamStore container plus a key=value sidecar describing the model."""
    model.params.save(f"{path_prefix}.pst")
    lines = [
        f"variant={model.variant}",
        f"top_latent_dim={model.top_latent_dim}",
        f"beta={model.beta}",
        f"delta={model.delta}",
        f"seed={model.seed}",
        f"top_widths={','.join(map(str, model.top_widths))}",
        f"n_modalities={len(model.modalities)}",
    ]
    for i, s in enumerate(model.modalities):
        lines.append(
            f"modality{i}={s.name};{s.data_dim};{s.likelihood};{s.latent_dim};"
            f"{s.lam};{s.alpha};{s.gamma};"
            f"{','.join(map(str, s.enc_widths))};{','.join(map(str, s.dec_widths))};"
            f"{s.activation}"
        )
    with open(f"{path_prefix}.meta", "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path_prefix: str) -> MuseModel:
    meta = {}
    with open(f"{path_prefix}.meta", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line and "=" in line:
                key, val = line.split("=", 1)
                meta[key] = val
    specs = []
    for i in range(int(meta["n_modalities"])):
        (name, data_dim, likelihood, latent_dim, lam, alpha, gamma,
         enc_w, dec_w, activation) = meta[f"modality{i}"].split(";")
        specs.append(ModalitySpec(
            name=name, data_dim=int(data_dim), likelihood=likelihood,
            latent_dim=int(latent_dim), lam=float(lam), alpha=float(alpha),
            gamma=float(gamma),
            enc_widths=tuple(int(w) for w in enc_w.split(",") if w),
            dec_widths=tuple(int(w) for w in dec_w.split(",") if w),
            activation=activation,
        ))
    model = MuseModel(
        specs,
        top_latent_dim=int(meta["top_latent_dim"]),
        beta=float(meta["beta"]),
        delta=float(meta["delta"]),
        variant=meta["variant"],
        top_widths=tuple(int(w) for w in meta["top_widths"].split(",") if w),
        seed=int(meta["seed"]),
    )
    loaded = ParamStore.load(f"{path_prefix}.pst")
    for name in loaded.names():
        model.params[name] = loaded[name]
    return model
