"""Value functions and losses for the three matching games.

Every game classifies three kinds of real/fake inputs:

    data:    x            vs  G(z),           z ~ N(0, I)
    latent:  z            vs  z_hat,          z_hat ~ q(z | x)
    pairs:   (x, a(x))    vs  (x, G(z_hat))

``pagan_losses`` evaluates all five training losses of one step for the
standard/non-saturating, f-divergence and Wasserstein-GP variants.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from pagan import tensor as T
from pagan.augment import AugmentConfig, augment
from pagan.errors import DomainError, NumericError
from pagan.nets import sample_latent
from pagan.tensor import Tensor

PROB_CLAMP = 1e-7
LN2 = float(np.log(2.0))

GAME_KINDS = ("standard", "nonsaturating", "fgan", "wasserstein")


def _clamped(p):
    return T.clip(T.as_tensor(p), PROB_CLAMP, 1 - PROB_CLAMP)


def _require_batch(*ts):
    for t in ts:
        if T.as_tensor(t).size == 0:
            raise ValueError("empty batch")


def discriminator_loss(d_real, d_fake):
    """-mean log D(real) - mean log(1 - D(fake))."""
    _require_batch(d_real, d_fake)
    real = T.mean(T.log(_clamped(d_real)))
    fake = T.mean(T.log(T.sub(1.0, _clamped(d_fake))))
    return T.neg(T.add(real, fake))


def nonsaturating_loss(d_fake):
    """-mean log D(fake): the generator-side surrogate for log(1 - D)."""
    _require_batch(d_fake)
    return T.neg(T.mean(T.log(_clamped(d_fake))))


def saturating_loss(d_fake):
    """mean log(1 - D(fake)), minimized by the generator in the plain minimax game."""
    _require_batch(d_fake)
    return T.mean(T.log(T.sub(1.0, _clamped(d_fake))))


# --- f-divergences -------------------------------------------------------------

@dataclass(frozen=True)
class FDivergenceSpec:
    """Generator f, its derivative, its Fenchel conjugate and the output map.

    ``f``, ``f_prime`` and ``f_star`` act on numpy arrays; ``conjugate`` and
    ``activation`` act on tensors.  ``t_max`` is the open upper end of
    dom(f*) (``inf`` when unbounded).
    """

    name: str
    f: Callable
    f_prime: Callable
    f_star: Callable
    conjugate: Callable
    activation: Callable
    t_max: float = np.inf

    def check_domain(self, t):
        data = T.as_tensor(t).data
        if not np.all(np.isfinite(data)) or np.any(data >= self.t_max):
            raise DomainError(f"{self.name}: critic value outside dom(f*) (< {self.t_max})")


def _xlogx(u):
    u = np.asarray(u, dtype=np.float64)
    return np.where(u > 0, u * np.log(np.where(u > 0, u, 1.0)), 0.0)


FDIVERGENCES = {
    "kl": FDivergenceSpec(
        "kl",
        f=_xlogx,
        f_prime=lambda u: 1.0 + np.log(u),
        f_star=lambda t: np.exp(np.asarray(t) - 1.0),
        conjugate=lambda t: T.exp(T.sub(t, 1.0)),
        activation=lambda v: v,
    ),
    "reverse-kl": FDivergenceSpec(
        "reverse-kl",
        f=lambda u: -np.log(u),
        f_prime=lambda u: -1.0 / np.asarray(u),
        f_star=lambda t: -1.0 - np.log(-np.asarray(t)),
        conjugate=lambda t: T.sub(-1.0, T.log(T.neg(t))),
        activation=lambda v: T.neg(T.exp(T.neg(v))),
        t_max=0.0,
    ),
    "js": FDivergenceSpec(
        "js",
        f=lambda u: _xlogx(u) - (np.asarray(u) + 1.0) * np.log((np.asarray(u) + 1.0) / 2.0),
        f_prime=lambda u: np.log(2.0 * np.asarray(u) / (1.0 + np.asarray(u))),
        f_star=lambda t: -np.log(2.0 - np.exp(t)),
        conjugate=lambda t: T.neg(T.log(T.sub(2.0, T.exp(t)))),
        activation=lambda v: T.sub(LN2, T.softplus(T.neg(v))),
        t_max=LN2,
    ),
    "squared-hellinger": FDivergenceSpec(
        "squared-hellinger",
        f=lambda u: (np.sqrt(u) - 1.0) ** 2,
        f_prime=lambda u: 1.0 - 1.0 / np.sqrt(u),
        f_star=lambda t: np.asarray(t) / (1.0 - np.asarray(t)),
        conjugate=lambda t: T.div(t, T.sub(1.0, t)),
        activation=lambda v: T.sub(1.0, T.exp(T.neg(v))),
        t_max=1.0,
    ),
}


def fdivergence(name):
    try:
        return FDIVERGENCES[name]
    except KeyError:
        raise ValueError(f"unknown f-divergence {name!r}; choose from {sorted(FDIVERGENCES)}") from None


def f_gan_value(t_real, t_fake, spec):
    """Variational bound mean T(real) - mean f*(T(fake))."""
    _require_batch(t_real, t_fake)
    spec.check_domain(t_real)
    spec.check_domain(t_fake)
    return T.sub(T.mean(t_real), T.mean(spec.conjugate(T.as_tensor(t_fake))))


# --- Wasserstein critic ------------------------------------------------------------

def interpolate(real_parts, fake_parts, alpha_mode="shared", rng=None, alpha=None):
    """Per-sample convex combinations alpha * real + (1 - alpha) * fake.

    ``shared`` uses one alpha per sample for every part of a pair;
    ``independent`` draws one alpha per part.  An explicit ``alpha`` of
    shape (N,) or (parts, N) overrides the draw.
    """
    real_parts = [np.asarray(T.as_tensor(p).data) for p in real_parts]
    fake_parts = [np.asarray(T.as_tensor(p).data) for p in fake_parts]
    n = len(real_parts[0])
    if alpha is None:
        if alpha_mode == "shared":
            alpha = np.tile(rng.uniform(0.0, 1.0, size=n), (len(real_parts), 1))
        elif alpha_mode == "independent":
            alpha = rng.uniform(0.0, 1.0, size=(len(real_parts), n))
        else:
            raise ValueError(f"alpha_mode must be 'shared' or 'independent', got {alpha_mode!r}")
    alpha = np.broadcast_to(np.asarray(alpha, dtype=np.float64), (len(real_parts), n))
    out = []
    for a, r, f in zip(alpha, real_parts, fake_parts):
        a = a.reshape((n,) + (1,) * (r.ndim - 1))
        out.append((a * r + (1.0 - a) * f).astype(r.dtype))
    return out


def gradient_penalty(critic, inputs, lam):
    """lam * mean (||d critic / d input|| - 1)^2, differentiable w.r.t. the critic."""
    if lam <= 0:
        raise ValueError(f"gradient penalty strength must be > 0, got {lam}")
    _, grad = critic.value_and_input_grad(inputs)
    dev = T.sub(T.row_norm(grad), 1.0)
    return T.mul(T.mean(T.mul(dev, dev)), lam)


def wasserstein_losses(critic, real_parts, fake_parts, lam=10.0, alpha_mode="shared", rng=None,
                       fuse=None, alpha=None, generator_side=True):
    """Critic loss with gradient penalty, and the generator-side loss.

    ``real_parts``/``fake_parts`` hold one array for a plain critic or two
    (x, y) for a pair critic; ``fuse`` joins the parts into a critic input.
    The critic loss sees detached fakes; the generator-side loss evaluates a
    frozen critic on the live fakes.
    """
    if lam <= 0:
        raise ValueError(f"gradient penalty strength must be > 0, got {lam}")
    fuse = fuse or (lambda *parts: parts[0])
    fake_live = fuse(*fake_parts)
    real_in = fuse(*real_parts)
    both = T.concat([T.as_tensor(real_in).detach(), T.as_tensor(fake_live).detach()], axis=0)
    scores = critic(both)
    n = len(real_in)
    critic_loss = T.sub(T.mean(scores[n:]), T.mean(scores[:n]))
    mixed = fuse(*[Tensor(p) for p in interpolate(real_parts, fake_parts, alpha_mode, rng, alpha)])
    critic_loss = T.add(critic_loss, gradient_penalty(critic, mixed, lam))
    if not generator_side:
        return critic_loss, None
    gen_loss = T.neg(T.mean(critic(fake_live, frozen=True, update=False)))
    return critic_loss, gen_loss


# --- the full step ------------------------------------------------------------

@dataclass(frozen=True)
class GameKind:
    kind: str = "nonsaturating"
    fdiv: str = "js"
    gp_lambda: float = 10.0
    alpha_mode: str = "shared"

    def __post_init__(self):
        if self.kind not in GAME_KINDS:
            raise ValueError(f"game must be one of {GAME_KINDS}, got {self.kind!r}")
        if self.kind == "wasserstein" and self.gp_lambda <= 0:
            raise ValueError("gp_lambda must be > 0 in wasserstein mode")
        if self.alpha_mode not in ("shared", "independent"):
            raise ValueError(f"alpha_mode must be shared or independent, got {self.alpha_mode!r}")
        if self.kind == "fgan":
            fdivergence(self.fdiv)

    @property
    def critic_head(self):
        """True when discriminators emit raw scores instead of probabilities."""
        return self.kind in ("fgan", "wasserstein")


@dataclass
class PaganLosses:
    d_x: Tensor
    d_z: Tensor
    d_xx: Tensor
    g: Tensor
    e: Tensor
    disc_total: Tensor
    gen_total: Tensor
    samples: dict

    names = ("d_x", "d_z", "d_xx", "g", "e")

    def values(self):
        return {k: float(getattr(self, k).item()) for k in self.names}


def _split(t, n):
    return t[:n], t[n:]


def _check_finite(terms):
    for name, t in terms.items():
        if not np.isfinite(t.item()):
            raise NumericError(f"loss {name} is not finite ({t.item()})", where=name)


def sample_plan(bundle, x, rng, augment_config):
    """Draw z, z_hat, x_pr, x_rec and x_aug for one data batch."""
    n = len(x)
    dtype = x.dtype
    z = rng.standard_normal((n, bundle.generator.latent_dim)).astype(dtype)
    posterior = bundle.encoder(x)
    z_hat = sample_latent(posterior, rng)
    images = bundle.generator(T.concat([Tensor(z), z_hat], axis=0))
    x_pr, x_rec = _split(images, n)
    x_aug = augment(x, augment_config, rng)
    return dict(x=x, z=z, z_hat=z_hat, x_pr=x_pr, x_rec=x_rec, x_aug=x_aug, posterior=posterior)


def pagan_losses(bundle, x_batch, rng, game=None, augment_config=None, generator_side=True):
    """All five losses (L_d^x, L_d^z, L_d^xx, L_g, L_e) for one batch.

    Must run inside a :class:`~pagan.tensor.Tape` for gradients.  Besides the
    five losses, two roots are returned for a two-pass update:

    * ``disc_total = L_d^x + L_d^z + L_d^xx``; the three blocks share no
      parameters, so one backward gives each block its own gradient.
    * ``gen_total``: the sum of the distinct generator-side terms.  Its
      gradient w.r.t. theta equals dL_g/dtheta and w.r.t. phi equals
      dL_e/dphi, because the data-game term does not depend on phi and the
      latent-game term does not depend on theta.

    With ``generator_side=False`` only the discriminator losses are built
    (extra critic steps); ``g``, ``e`` and ``gen_total`` are then None.
    """
    game = game or GameKind()
    augment_config = augment_config or AugmentConfig()
    x = np.asarray(x_batch)
    if len(x) < 2:
        raise ValueError(f"batch size must be >= 2, got {len(x)}")
    s = sample_plan(bundle, x, rng, augment_config)
    n = len(x)
    z, z_hat, x_pr, x_rec, x_aug = s["z"], s["z_hat"], s["x_pr"], s["x_rec"], s["x_aug"]
    dx, dz, dxx = bundle.disc_x, bundle.disc_z, bundle.disc_xx

    if game.kind == "wasserstein":
        kw = dict(lam=game.gp_lambda, alpha_mode=game.alpha_mode, rng=rng,
                  generator_side=generator_side)
        d_x, gx = wasserstein_losses(dx, [x], [x_pr], **kw)
        d_z, gz = wasserstein_losses(dz, [z], [z_hat], **kw)
        d_xx, gxx = wasserstein_losses(dxx, [x, x_aug], [x, x_rec], fuse=dxx.fuse, **kw)
    else:
        px_real, px_fake = _split(dx(T.concat([Tensor(x), x_pr.detach()], axis=0)), n)
        pz_real, pz_fake = _split(dz(T.concat([Tensor(z), z_hat.detach()], axis=0)), n)
        pair_in = T.concat([dxx.fuse(x, x_aug), dxx.fuse(x, x_rec.detach())], axis=0)
        pxx_real, pxx_fake = _split(dxx(pair_in), n)
        if generator_side:
            fx = dx(x_pr, frozen=True, update=False)
            fz = dz(z_hat, frozen=True, update=False)
            fxx = dxx.pair(x, x_rec, frozen=True, update=False)
        if game.kind == "fgan":
            spec = fdivergence(game.fdiv)
            act = spec.activation
            d_x = T.neg(f_gan_value(act(px_real), act(px_fake), spec))
            d_z = T.neg(f_gan_value(act(pz_real), act(pz_fake), spec))
            d_xx = T.neg(f_gan_value(act(pxx_real), act(pxx_fake), spec))
            if generator_side:
                gx, gz, gxx = (T.neg(T.mean(spec.conjugate(act(v)))) for v in (fx, fz, fxx))
        else:
            d_x = discriminator_loss(px_real, px_fake)
            d_z = discriminator_loss(pz_real, pz_fake)
            d_xx = discriminator_loss(pxx_real, pxx_fake)
            if generator_side:
                gen = nonsaturating_loss if game.kind == "nonsaturating" else saturating_loss
                gx, gz, gxx = gen(fx), gen(fz), gen(fxx)

    terms = {"L_d^x": d_x, "L_d^z": d_z, "L_d^xx": d_xx}
    l_g = l_e = gen_total = None
    if generator_side:
        l_g = T.add(gx, gxx)
        l_e = T.add(gz, gxx)
        gen_total = T.add(T.add(gx, gz), gxx)
        terms.update({"L_g": l_g, "L_e": l_e})
    _check_finite(terms)
    return PaganLosses(
        d_x=d_x, d_z=d_z, d_xx=d_xx, g=l_g, e=l_e,
        disc_total=T.add(T.add(d_x, d_z), d_xx),
        gen_total=gen_total,
        samples=s,
    )

