"""Generator, encoder and the three discriminators.

Image data uses small strided conv stacks (DCGAN family); 2-D point data
uses MLPs.  Discriminator weights are spectrally normalized with one
persistent power-iteration vector per weight.

Every discriminator layer can also emit the gradient of its output with
respect to its input *as ordinary tape operations*.  That is what lets the
Wasserstein gradient penalty be differentiated w.r.t. the critic weights
without a second-order backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from pagan import tensor as T
from pagan.errors import NumericError
from pagan.tensor import Tensor

SIGMA_FLOOR = 1e-12
LATENT_HIDDEN = (512, 256)


def _unit(v):
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def spectral_normalize(weight, u, iters=1):
    """Divide ``weight`` by a power-iteration estimate of its top singular value.

    ``weight`` is flattened to (out, rest) first, so conv kernels work too.
    Returns the normalized weight (differentiable through the estimate) and
    the updated left singular vector.  ``iters=0`` reuses ``u`` as is.
    """
    weight = T.as_tensor(weight)
    if iters < 0:
        raise ValueError("iters must be >= 0")
    mat = weight.data.reshape(weight.shape[0], -1).astype(np.float64)
    u = np.asarray(u, dtype=np.float64)
    if u.shape != (mat.shape[0],):
        raise ValueError(f"power vector shape {u.shape} != ({mat.shape[0]},)")
    new_u = u
    v = _unit(mat.T @ new_u)
    for _ in range(iters):
        v_next = mat.T @ new_u
        if np.linalg.norm(v_next) == 0:
            break
        v = _unit(v_next)
        u_next = mat @ v
        if np.linalg.norm(u_next) == 0:
            break
        new_u = _unit(u_next)
    dt = weight.dtype
    flat = T.reshape(weight, (mat.shape[0], -1))
    sigma = T.matmul(T.matmul(Tensor(new_u[None, :].astype(dt)), flat),
                     Tensor(v[:, None].astype(dt)))
    if sigma.item() < SIGMA_FLOOR:
        sigma = Tensor(np.asarray([[SIGMA_FLOOR]], dtype=dt))
    return T.div(weight, T.reshape(sigma, ())), new_u


def _uniform(rng, shape, fan_in, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Layer:
    """Base layer: no parameters, identity input-gradient."""

    def params(self):
        return []

    def spectral_vectors(self):
        return []

    def forward(self, x, frozen=False, update=True):
        raise NotImplementedError

    def input_grad(self, g):
        raise NotImplementedError(f"{type(self).__name__} has no input gradient")

    def __repr__(self):
        return type(self).__name__


class _Weighted(Layer):
    def __init__(self, weight, bias, spectral, power_iters, rng=None):
        self.weight = Tensor(weight, requires_grad=True)
        self.bias = Tensor(bias, requires_grad=True)
        self.spectral = spectral
        self.power_iters = power_iters
        self.u = None
        if spectral:
            # kept in the weight dtype so a 32-bit checkpoint restores it exactly
            self.u = _unit(rng.standard_normal(weight.shape[0])).astype(weight.dtype)
        self._w_eff = None

    def params(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def spectral_vectors(self):
        return [("u", self)] if self.spectral else []

    def effective(self, frozen, update):
        w = self.weight.detach() if frozen else self.weight
        b = self.bias.detach() if frozen else self.bias
        if self.spectral:
            w, u = spectral_normalize(w, self.u, self.power_iters if update else 0)
            if update:
                self.u = u.astype(self.weight.dtype)
        return w, b


class Linear(_Weighted):
    def __init__(self, fan_in, fan_out, rng, spectral=False, power_iters=1, dtype=np.float32):
        super().__init__(_uniform(rng, (fan_out, fan_in), fan_in, dtype),
                         _uniform(rng, (fan_out,), fan_in, dtype), spectral, power_iters, rng)

    def forward(self, x, frozen=False, update=True):
        w, b = self.effective(frozen, update)
        self._w_eff = w
        return T.add(T.matmul(x, T.transpose(w)), b)

    def input_grad(self, g):
        return T.matmul(g, self._w_eff)

    def __repr__(self):
        o, i = self.weight.shape
        return f"Linear({i}->{o}{', sn' if self.spectral else ''})"


class Conv2d(_Weighted):
    def __init__(self, cin, cout, kernel, stride, padding, rng, spectral=False,
                 power_iters=1, dtype=np.float32):
        fan_in = cin * kernel * kernel
        super().__init__(_uniform(rng, (cout, cin, kernel, kernel), fan_in, dtype),
                         _uniform(rng, (cout,), fan_in, dtype), spectral, power_iters, rng)
        self.stride = stride
        self.padding = padding
        self._in_hw = None

    def forward(self, x, frozen=False, update=True):
        w, b = self.effective(frozen, update)
        self._w_eff = w
        self._in_hw = x.shape[2:]
        return T.conv2d(x, w, b, self.stride, self.padding)

    def input_grad(self, g):
        k = self.weight.shape[2]
        s, p = self.stride, self.padding
        op = tuple(n - ((m - 1) * s - 2 * p + k) for n, m in zip(self._in_hw, g.shape[2:]))
        return T.conv_transpose2d(g, self._w_eff, None, s, p, op)

    def __repr__(self):
        o, i, k, _ = self.weight.shape
        return f"Conv2d({i}->{o}, k{k}s{self.stride}p{self.padding}{', sn' if self.spectral else ''})"


class ConvTranspose2d(_Weighted):
    def __init__(self, cin, cout, kernel, stride, padding, output_padding, rng,
                 dtype=np.float32):
        fan_in = cin * kernel * kernel
        super().__init__(_uniform(rng, (cin, cout, kernel, kernel), fan_in, dtype),
                         _uniform(rng, (cout,), fan_in, dtype), False, 0)
        self.stride = stride
        self.padding = padding
        self.output_padding = output_padding

    def forward(self, x, frozen=False, update=True):
        w, b = self.effective(frozen, update)
        return T.conv_transpose2d(x, w, b, self.stride, self.padding, self.output_padding)

    def __repr__(self):
        i, o, k, _ = self.weight.shape
        return f"ConvTranspose2d({i}->{o}, k{k}s{self.stride}p{self.padding})"


class LeakyReLU(Layer):
    def __init__(self, slope=0.2):
        self.slope = slope
        self._scale = None

    def forward(self, x, frozen=False, update=True):
        self._scale = np.where(x.data > 0, 1.0, self.slope).astype(x.dtype)
        return T.leaky_relu(x, self.slope)

    def input_grad(self, g):
        # the activation pattern is piecewise constant in the weights
        return T.mul(g, Tensor(self._scale))

    def __repr__(self):
        return f"LeakyReLU({self.slope})"


class ReLU(LeakyReLU):
    def __init__(self):
        super().__init__(0.0)

    def __repr__(self):
        return "ReLU"


class Tanh(Layer):
    def forward(self, x, frozen=False, update=True):
        return T.tanh(x)


class Reshape(Layer):
    def __init__(self, shape):
        self.shape = tuple(shape)
        self._in_shape = None

    def forward(self, x, frozen=False, update=True):
        self._in_shape = x.shape
        return T.reshape(x, (x.shape[0],) + self.shape)

    def input_grad(self, g):
        return T.reshape(g, self._in_shape)

    def __repr__(self):
        return f"Reshape{self.shape}"


class Sequential:
    """Ordered layer stack with finite-value checks after every layer."""

    def __init__(self, layers, name="net"):
        self.layers = list(layers)
        self.name = name

    def __call__(self, x, frozen=False, update=True):
        return self.forward(x, frozen, update)

    def forward(self, x, frozen=False, update=True):
        x = T.as_tensor(x)
        for i, layer in enumerate(self.layers):
            x = layer.forward(x, frozen, update)
            if not np.all(np.isfinite(x.data)):
                raise NumericError(f"{self.name}: non-finite activation after layer {i} ({layer!r})",
                                   where=(self.name, i))
        return x

    def input_grad(self, g):
        """Vector-Jacobian product w.r.t. the input of the most recent forward."""
        for layer in reversed(self.layers):
            g = layer.input_grad(g)
        return g

    def value_and_input_grad(self, x, frozen=False, update=False):
        """Outputs (N, 1) and d(sum of outputs)/d input, both on the tape."""
        out = self.forward(x, frozen, update)
        seed = Tensor(np.ones(out.shape, dtype=out.dtype))
        return out, self.input_grad(seed)

    def named_params(self):
        for i, layer in enumerate(self.layers):
            for pname, p in layer.params():
                yield f"{self.name}.{i}.{pname}", p

    def params(self):
        return [p for _, p in self.named_params()]

    def spectral_layers(self):
        for i, layer in enumerate(self.layers):
            if getattr(layer, "spectral", False):
                yield f"{self.name}.{i}.u", layer

    def __repr__(self):
        inner = ", ".join(repr(layer) for layer in self.layers)
        return f"{self.name}[{inner}]"


@dataclass
class GaussianPosterior:
    mu: Tensor
    log_sigma: Tensor

    def __post_init__(self):
        if self.mu.shape != self.log_sigma.shape:
            raise ValueError(f"mu {self.mu.shape} and log_sigma {self.log_sigma.shape} differ")

    @property
    def sigma(self):
        return T.exp(self.log_sigma)


def sample_latent(posterior, rng=None, eps=None):
    """Reparameterized draw z = mu + sigma * eps with eps ~ N(0, I)."""
    if eps is None:
        eps = rng.standard_normal(posterior.mu.shape)
    eps = Tensor(np.asarray(eps, dtype=posterior.mu.dtype))
    return T.add(posterior.mu, T.mul(posterior.sigma, eps))


class Generator:
    def __init__(self, net, data_shape, latent_dim):
        self.net = net
        self.data_shape = tuple(data_shape)
        self.latent_dim = latent_dim

    def __call__(self, z):
        z = T.as_tensor(z)
        if z.ndim != 2 or z.shape[1] != self.latent_dim:
            raise ValueError(f"generator expects (batch, {self.latent_dim}), got {z.shape}")
        return self.net(z)

    def params(self):
        return self.net.params()


class Encoder:
    def __init__(self, net, data_shape, latent_dim):
        self.net = net
        self.data_shape = tuple(data_shape)
        self.latent_dim = latent_dim

    def __call__(self, x):
        x = T.as_tensor(x)
        if tuple(x.shape[1:]) != self.data_shape:
            raise ValueError(f"encoder expects (batch, *{self.data_shape}), got {x.shape}")
        out = self.net(x)
        k = self.latent_dim
        return GaussianPosterior(out[:, :k], out[:, k:])

    def params(self):
        return self.net.params()


class Discriminator:
    """Conv or MLP body with a sigmoid head (probabilities) or none (critic)."""

    def __init__(self, net, input_shape, critic=False):
        self.net = net
        self.input_shape = tuple(input_shape)
        self.critic = critic

    def _check(self, x):
        if tuple(x.shape[1:]) != self.input_shape:
            raise ValueError(f"{self.net.name} expects (batch, *{self.input_shape}), got {x.shape}")

    def __call__(self, x, frozen=False, update=True):
        x = T.as_tensor(x)
        self._check(x)
        out = self.net(x, frozen, update)
        return out if self.critic else T.sigmoid(out)

    def raw(self, x, frozen=False, update=True):
        """Output before any head activation."""
        x = T.as_tensor(x)
        self._check(x)
        return self.net(x, frozen, update)

    def value_and_input_grad(self, x, frozen=False):
        x = T.as_tensor(x)
        self._check(x)
        return self.net.value_and_input_grad(x, frozen)

    def params(self):
        return self.net.params()


class PairDiscriminator(Discriminator):
    """Discriminator over fused pairs (x, y).

    ``fusion="width"`` concatenates along the last axis (image width, or the
    feature axis for point data); ``"channel"`` along axis 1.
    """

    def __init__(self, net, item_shape, fusion="width", critic=False):
        if fusion not in ("width", "channel"):
            raise ValueError(f"unknown fusion {fusion!r}")
        self.item_shape = tuple(item_shape)
        self.fusion = fusion
        super().__init__(net, fused_shape(item_shape, fusion), critic)

    def fuse(self, x, y):
        x, y = T.as_tensor(x), T.as_tensor(y)
        if x.shape != y.shape:
            raise ValueError(f"pair members differ in shape: {x.shape} vs {y.shape}")
        return T.concat([x, y], axis=-1 if self.fusion == "width" else 1)

    def pair(self, x, y, frozen=False, update=True):
        return self(self.fuse(x, y), frozen, update)


def fused_shape(item_shape, fusion):
    shape = list(item_shape)
    if fusion == "width" or len(shape) == 1:
        shape[-1] *= 2
    else:
        shape[0] *= 2
    return tuple(shape)


def _conv_sizes(n, depth):
    sizes = [n]
    for _ in range(depth):
        sizes.append((sizes[-1] + 2 - 4) // 2 + 1)
    return sizes


def conv_body(in_shape, out_dim, width, depth, rng, spectral, name, power_iters=1,
              dtype=np.float32):
    c, h, w = in_shape
    hs, ws = _conv_sizes(h, depth), _conv_sizes(w, depth)
    if min(hs[-1], ws[-1]) < 1:
        raise ValueError(f"input {in_shape} too small for {depth} stride-2 layers")
    layers, ch = [], c
    for i in range(depth):
        out_ch = width * 2 ** i
        layers += [Conv2d(ch, out_ch, 4, 2, 1, rng, spectral, power_iters, dtype), LeakyReLU(0.2)]
        ch = out_ch
    layers += [Reshape((ch * hs[-1] * ws[-1],)),
               Linear(ch * hs[-1] * ws[-1], out_dim, rng, spectral, power_iters, dtype)]
    return Sequential(layers, name)


def conv_generator(latent_dim, out_shape, width, depth, rng, dtype=np.float32):
    c, h, w = out_shape
    hs, ws = _conv_sizes(h, depth), _conv_sizes(w, depth)
    ch = width * 2 ** (depth - 1)
    layers = [Linear(latent_dim, ch * hs[-1] * ws[-1], rng, dtype=dtype), ReLU(),
              Reshape((ch, hs[-1], ws[-1]))]
    for i in range(depth, 0, -1):
        out_ch = c if i == 1 else width * 2 ** (i - 2)
        op = (hs[i - 1] - ((hs[i] - 1) * 2 - 2 + 4), ws[i - 1] - ((ws[i] - 1) * 2 - 2 + 4))
        layers.append(ConvTranspose2d(ch, out_ch, 4, 2, 1, op, rng, dtype))
        layers.append(Tanh() if i == 1 else ReLU())
        ch = out_ch
    return Sequential(layers, "generator")


def mlp(sizes, rng, spectral, name, slope=0.2, power_iters=1, dtype=np.float32, out_act=None):
    layers = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(Linear(a, b, rng, spectral, power_iters, dtype))
        if i < len(sizes) - 2:
            layers.append(LeakyReLU(slope))
    if out_act is not None:
        layers.append(out_act)
    return Sequential(layers, name)


@dataclass
class ModelBundle:
    """The five networks of the model: theta, phi, psi_x, psi_z, psi_xx."""

    generator: Generator
    encoder: Encoder
    disc_x: Discriminator
    disc_z: Discriminator
    disc_xx: PairDiscriminator
    meta: dict = field(default_factory=dict)

    @property
    def theta(self):
        return self.generator.params()

    @property
    def phi(self):
        return self.encoder.params()

    @property
    def psi_x(self):
        return self.disc_x.params()

    @property
    def psi_z(self):
        return self.disc_z.params()

    @property
    def psi_xx(self):
        return self.disc_xx.params()

    def blocks(self):
        """Parameter blocks in update order: discriminators, generator, encoder."""
        return {"psi_x": self.psi_x, "psi_z": self.psi_z, "psi_xx": self.psi_xx,
                "theta": self.theta, "phi": self.phi}

    def _nets(self):
        return [self.disc_x.net, self.disc_z.net, self.disc_xx.net,
                self.generator.net, self.encoder.net]

    def named_params(self):
        for net in self._nets():
            yield from net.named_params()

    def spectral_state(self):
        out = {}
        for net in self._nets():
            for name, layer in net.spectral_layers():
                out[name] = layer.u
        return out

    def state_arrays(self):
        """Flat name -> ndarray snapshot of every parameter and power vector."""
        state = {name: p.data for name, p in self.named_params()}
        state.update(self.spectral_state())
        return state

    def load_state_arrays(self, state):
        params = dict(self.named_params())
        layers = {name: layer for net in self._nets() for name, layer in net.spectral_layers()}
        missing = (set(params) | set(layers)) - set(state)
        if missing:
            raise KeyError(f"state is missing {sorted(missing)[:5]}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype).copy()
        for name, layer in layers.items():
            layer.u = np.asarray(state[name], dtype=layer.weight.dtype).copy()


def build_bundle(data_shape, latent_dim, rng, *, width=16, depth=3, hidden=(128, 128),
                 critic=False, fusion=None, power_iters=1, dtype=np.float32):
    """Build all five networks for ``data_shape`` ((C, H, W) images or (D,) points)."""
    data_shape = tuple(data_shape)
    if fusion is None:
        fusion = "channel" if critic else "width"
    sn = dict(spectral=True, power_iters=power_iters, dtype=dtype)
    if len(data_shape) == 3:
        gen = conv_generator(latent_dim, data_shape, width, depth, rng, dtype)
        enc = conv_body(data_shape, 2 * latent_dim, width, depth, rng, False, "encoder", dtype=dtype)
        dx = conv_body(data_shape, 1, width, depth, rng, name="disc_x", **sn)
        dxx = conv_body(fused_shape(data_shape, fusion), 1, width, depth, rng, name="disc_xx", **sn)
    elif len(data_shape) == 1:
        d = data_shape[0]
        gen = mlp([latent_dim, *hidden, d], rng, False, "generator", slope=0.0, dtype=dtype)
        enc = mlp([d, *hidden, 2 * latent_dim], rng, False, "encoder", dtype=dtype)
        dx = mlp([d, *hidden, 1], rng, name="disc_x", **sn)
        dxx = mlp([2 * d, *hidden, 1], rng, name="disc_xx", **sn)
    else:
        raise ValueError(f"unsupported data shape {data_shape}")
    dz = mlp([latent_dim, *LATENT_HIDDEN, 1], rng, name="disc_z", **sn)
    return ModelBundle(
        generator=Generator(gen, data_shape, latent_dim),
        encoder=Encoder(enc, data_shape, latent_dim),
        disc_x=Discriminator(dx, data_shape, critic),
        disc_z=Discriminator(dz, (latent_dim,), critic),
        disc_xx=PairDiscriminator(dxx, data_shape, fusion, critic),
        meta=dict(data_shape=data_shape, latent_dim=latent_dim, width=width, depth=depth,
                  hidden=tuple(hidden), critic=critic, fusion=fusion),
    )
