"""Channel realizations, the effective channel G, and its square augmentation.

The augmentation appends an identity block and zero observations so that
the under-determined N x K' system becomes a square upper-triangular one:

    G_tilde = [[G1, G2], [0, I]],   y_tilde = [y; 0]

For every hypothesis x the residuals then satisfy

    ||y_tilde - G_tilde x||^2 = ||y - G x||^2 + ||x2||^2

where x2 is the tail of x beyond the first N layers.  With constant-
modulus codebooks ||x2||^2 is the same for all hypotheses, so minimizing
either residual selects the same symbols.
"""

from dataclasses import dataclass

import numpy as np

from .codebook import Codebook, MappingMatrix, SystemConfig

MODEL_AWGN = "awgn"
MODEL_RAYLEIGH = "rayleigh-flat"


class DegenerateChannelError(RuntimeError):
    """Raised when a diagonal channel gain is exactly zero; resample instead."""


@dataclass(frozen=True)
class ChannelRealization:
    """Per-user diagonal gains plus the noise level they were drawn with."""

    gains: np.ndarray      # (K, d_v) complex, row k = diag of H_k
    sigma2: float          # noise variance per complex dimension
    model: str

    def H(self, k: int) -> np.ndarray:
        """Diagonal gain matrix of user k."""
        return np.diag(self.gains[k])


@dataclass(frozen=True)
class EffectiveChannel:
    """G, the augmented G_tilde and the matching observation vectors."""

    G: np.ndarray          # (N, K') complex
    G_tilde: np.ndarray    # (K', K') complex, upper triangular
    y: np.ndarray          # (N,) complex
    y_tilde: np.ndarray    # (K',) complex = [y; 0]


def sample_channel(cfg: SystemConfig, model: str, rng: np.random.Generator,
                   sigma2: float = 1.0) -> ChannelRealization:
    """Draw a channel realization from a seeded generator.

    awgn gives unit gains.  rayleigh-flat draws one unit-variance complex
    Gaussian gain per user and repeats it over the user's d_v resources
    (the flat-over-the-user model used in all fading runs here).  Zero
    gains are a probability-zero event; they are resampled so the head
    block of the augmentation stays invertible.
    """
    if model == MODEL_AWGN:
        gains = np.ones((cfg.K, cfg.d_v), dtype=np.complex128)
    elif model == MODEL_RAYLEIGH:
        while True:
            h = (rng.standard_normal(cfg.K) + 1j * rng.standard_normal(cfg.K)) / np.sqrt(2)
            if np.all(h != 0):
                break
        gains = np.repeat(h[:, None], cfg.d_v, axis=1)
    else:
        raise ValueError(f"unknown channel model {model!r}")
    return ChannelRealization(gains=gains, sigma2=float(sigma2), model=model)


def sample_noise(cfg: SystemConfig, sigma2: float, rng: np.random.Generator) -> np.ndarray:
    """Circular complex Gaussian noise with E|w_n|^2 = sigma2."""
    w = rng.standard_normal(cfg.N) + 1j * rng.standard_normal(cfg.N)
    return w * np.sqrt(sigma2 / 2)


def effective_channel(mapping: MappingMatrix, chan: ChannelRealization) -> np.ndarray:
    """G = [S_1 H_1, ..., S_K H_K]; one nonzero per column, on the layer's RE."""
    cfg = mapping.cfg
    G = np.zeros((cfg.N, cfg.K_prime), dtype=np.complex128)
    for kp in range(cfg.K_prime):
        k, l = divmod(kp, cfg.d_v)
        G[mapping.user_res[k, l], kp] = chan.gains[k, l]
    return G


def augment(G: np.ndarray, y: np.ndarray) -> EffectiveChannel:
    """Assemble the square system [[G1, G2], [0, I]] with y_tilde = [y; 0].

    Requires the mapping behind G to be in upper-triangular form already,
    which makes the head block G1 diagonal.  A zero on that diagonal means
    a degenerate channel draw and raises DegenerateChannelError.
    """
    N, Kp = G.shape
    if np.any(np.diagonal(G[:, :N]) == 0):
        raise DegenerateChannelError("degenerate channel; resample")
    G_tilde = np.zeros((Kp, Kp), dtype=np.complex128)
    G_tilde[:N, :] = G
    G_tilde[N:, N:] = np.eye(Kp - N)
    y_tilde = np.zeros(Kp, dtype=np.complex128)
    y_tilde[:N] = y
    return EffectiveChannel(G=G, G_tilde=G_tilde, y=y, y_tilde=y_tilde)


def sigma2_from_snr_db(snr_db: float, cb: Codebook) -> float:
    """Noise variance for a given SNR in dB.

    SNR here is the average received symbol energy per resource element
    over the noise variance: E_s = (sum of layer energies)/N under unit
    gains, which unit-variance Rayleigh draws preserve in expectation.
    """
    es_per_re = cb.avg_codeword_energy * cb.cfg.K / cb.cfg.N
    return es_per_re / (10.0 ** (snr_db / 10.0))
