"""Acoustic features and the synthetic speech-like task.

Synthetic utterances are produced directly in log-mel space: every symbol owns
a mel template, homophone symbols share one, and label strings come from the
same bigram chain that generates the LM's pretraining text.
"""
import hashlib
import io
import logging

import attr
import joblib
import numba
import numpy as np
import tqdm
from scipy.io import wavfile
from scipy.signal import get_window
from scipy.special import softmax, xlogy

from .util import ConfigError, InputError, InputTooShortError, as_rng, derive_seed, make_rng

logger = logging.getLogger(__name__)

BLANK = 0
DEFAULT_VOCAB_SIZE = 21
DEFAULT_N_MELS = 80
DEFAULT_TASK_SEED = 20240417
LOG_FLOOR = 1e-10
SPLIT_KEYS = dict(train=0, dev=1, test=2, homophone=3, test_other=4)
DEFAULT_SPLIT_SIZES = dict(train=4000, dev=200, test=400, homophone=400)
OTHER_NOISE_SCALE = 2.


def _finite(instance, attribute, value):
    if not np.all(np.isfinite(value)):
        raise InputError(f"{attribute.name} must be finite")


@attr.s
class Waveform:
    samples = attr.ib(converter=lambda x: np.asarray(x, dtype=np.float64), validator=_finite)
    sample_rate = attr.ib(default=16000)

    @sample_rate.validator
    def _check_rate(self, attribute, value):
        if value <= 0:
            raise InputError(f"sample_rate must be positive, got {value}")


@attr.s
class FeatureSequence:
    frames = attr.ib(converter=lambda x: np.asarray(x, dtype=np.float32), validator=_finite)
    frame_shift_ms = attr.ib(default=10)
    window_ms = attr.ib(default=25)

    @frames.validator
    def _check_frames(self, attribute, value):
        if value.ndim != 2 or value.shape[0] < 1:
            raise InputError(f"feature matrix must be T x D with T >= 1, got shape {value.shape}")

    @property
    def num_frames(self):
        return self.frames.shape[0]

    @property
    def dim(self):
        return self.frames.shape[1]


@attr.s
class LabelSequence:
    tokens = attr.ib(converter=lambda x: np.asarray(x, dtype=np.int64).reshape(-1))
    vocab_size = attr.ib(default=DEFAULT_VOCAB_SIZE)

    @tokens.validator
    def _check_tokens(self, attribute, value):
        if len(value) and (value.min() < 1 or value.max() >= self.vocab_size):
            raise InputError(f"labels must lie in [1, {self.vocab_size - 1}] (0 is the CTC blank)")

    def __len__(self):
        return len(self.tokens)

    def tolist(self):
        return self.tokens.tolist()


def check_stochastic(transitions, atol=1e-6):
    transitions = np.asarray(transitions, dtype=np.float64)
    if (transitions.ndim != 2 or transitions.shape[0] != transitions.shape[1]
            or (transitions < 0).any() or not np.allclose(transitions.sum(axis=1), 1, atol=atol)):
        raise ConfigError("transition matrix must be square, nonnegative, with rows summing to 1")
    return transitions


@attr.s
class SynthTaskSpec:
    vocab_size = attr.ib()
    transitions = attr.ib(converter=check_stochastic)
    templates = attr.ib(converter=lambda x: np.asarray(x, dtype=np.float32))
    homophone_pairs = attr.ib(converter=lambda pairs: [tuple(int(s) for s in p) for p in pairs], factory=list)
    duration_range = attr.ib(default=(8, 20), converter=tuple)
    noise = attr.ib(default=1.0)

    def __attrs_post_init__(self):
        n = self.vocab_size - 1
        if self.transitions.shape != (n, n):
            raise ConfigError(f"transition matrix must be {n}x{n} for vocab_size {self.vocab_size}")
        if self.templates.ndim != 2 or self.templates.shape[0] != n:
            raise ConfigError(f"need exactly one template per symbol ({n}), got {self.templates.shape}")
        seen = set()
        for pair in self.homophone_pairs:
            if len(pair) != 2 or seen & set(pair):
                raise ConfigError(f"homophone pairs must be disjoint pairs, got {self.homophone_pairs}")
            if not all(1 <= s < self.vocab_size for s in pair):
                raise ConfigError(f"homophone pair {pair} names a non-symbol")
            seen.update(pair)
            a, b = pair
            if not np.array_equal(self.templates[a - 1], self.templates[b - 1]):
                raise ConfigError(f"homophones {pair} must share one template")
        lo, hi = self.duration_range
        if not 1 <= lo <= hi:
            raise ConfigError(f"bad duration range {self.duration_range}")

    @property
    def n_symbols(self):
        return self.vocab_size - 1

    @property
    def n_mels(self):
        return self.templates.shape[1]

    @property
    def homophones(self):
        return frozenset(s for pair in self.homophone_pairs for s in pair)

    def save(self, filename):
        joblib.dump(attr.asdict(self), filename)

    @classmethod
    def load(cls, filename):
        return cls(**joblib.load(filename))


def make_task_spec(seed=DEFAULT_TASK_SEED, vocab_size=DEFAULT_VOCAB_SIZE, n_mels=DEFAULT_N_MELS,
                   n_homophone_pairs=2, temperature=0.35, noise=1.0, duration_range=(8, 20)):
    """Temperature-sharpened random bigram chain plus random mel templates."""
    rng = make_rng(seed)
    n = vocab_size - 1
    transitions = softmax(rng.standard_normal((n, n)) / temperature, axis=1)
    transitions /= transitions.sum(axis=1, keepdims=True)
    templates = rng.standard_normal((n, n_mels)).astype(np.float32)
    order = rng.permutation(n)[:2 * n_homophone_pairs] + 1
    pairs = [(int(order[2 * i]), int(order[2 * i + 1])) for i in range(n_homophone_pairs)]
    for a, b in pairs:
        templates[b - 1] = templates[a - 1]
    return SynthTaskSpec(vocab_size=vocab_size, transitions=transitions, templates=templates,
                         homophone_pairs=pairs, duration_range=duration_range, noise=noise)


def stationary_distribution(transitions):
    eigvals, eigvecs = np.linalg.eig(np.asarray(transitions).T)
    pi = np.real(eigvecs[:, np.argmin(np.abs(eigvals - 1))])
    pi = np.clip(pi / pi.sum(), 0, None)
    return pi / pi.sum()


def unigram_entropy(spec):
    pi = stationary_distribution(spec.transitions)
    return float(-xlogy(pi, pi).sum())


def bigram_entropy(spec):
    """Entropy rate of the chain in nats: the best achievable next-token loss."""
    pi = stationary_distribution(spec.transitions)
    return float(-(pi[:, None] * xlogy(spec.transitions, spec.transitions)).sum())


@numba.jit(nopython=True, cache=True)
def _walk_chain(cum, u, start):
    n = u.shape[0]
    out = np.empty(n, np.int64)
    state = start
    out[0] = state
    last = cum.shape[1] - 1
    for i in range(1, n):
        nxt = np.searchsorted(cum[state], u[i], side='right')
        state = min(nxt, last)
        out[i] = state
    return out


def _sample_chain(transitions, n, rng, pi=None):
    if pi is None:
        pi = stationary_distribution(transitions)
    u = rng.random(n)
    start = min(int(np.searchsorted(np.cumsum(pi), u[0], side='right')), len(pi) - 1)
    return _walk_chain(np.cumsum(transitions, axis=1), u, start)


def gen_bigram_text(spec, n_tokens, seed):
    """Text tokens 0..V-2 (text token = label - 1) drawn from the task's chain."""
    if n_tokens < 1:
        raise ConfigError(f"n_tokens must be >= 1, got {n_tokens}")
    transitions = check_stochastic(spec.transitions)
    return _sample_chain(transitions, int(n_tokens), as_rng(seed))


def synth_utterance(spec, labels, seed):
    rng = as_rng(seed)
    tokens = labels.tokens if isinstance(labels, LabelSequence) else np.asarray(labels)
    lo, hi = spec.duration_range
    durations = rng.integers(lo, hi + 1, size=len(tokens))
    frames = np.repeat(spec.templates[tokens - 1], durations, axis=0)
    frames = frames + spec.noise * rng.standard_normal(frames.shape)
    return FeatureSequence(frames)


def homophone_fraction(spec, tokens):
    if len(tokens) == 0:
        return 0.
    return float(np.isin(tokens, list(spec.homophones)).mean())


def gen_corpus(spec, n_utts, len_range=(3, 12), seed=0, min_homophone_frac=None, progress=False, max_tries=10000):
    if n_utts < 1:
        raise ConfigError(f"n_utts must be >= 1, got {n_utts}")
    lo, hi = len_range
    pi = stationary_distribution(spec.transitions)
    corpus = []
    for i in tqdm.trange(n_utts, desc="Synthesizing", disable=not progress):
        rng = make_rng(seed, i)
        for _ in range(max_tries):
            length = int(rng.integers(lo, hi + 1))
            tokens = _sample_chain(spec.transitions, length, rng, pi=pi) + 1
            if min_homophone_frac is None or homophone_fraction(spec, tokens) >= min_homophone_frac:
                break
        else:
            raise ConfigError(f"could not reach homophone fraction {min_homophone_frac} in {max_tries} draws")
        labels = LabelSequence(tokens, vocab_size=spec.vocab_size)
        corpus.append((synth_utterance(spec, labels, rng), labels))
    return corpus


def gen_homophone_corpus(spec, n_utts, len_range=(3, 12), seed=0, min_frac=0.4, progress=False):
    return gen_corpus(spec, n_utts, len_range, seed, min_homophone_frac=min_frac, progress=progress)


def gen_splits(spec, seed, sizes=None, len_range=(3, 12), progress=False, other_noise=None):
    """Named splits by keyed seeds. `test_other` (only when sized) is drawn at `other_noise`."""
    sizes = dict(DEFAULT_SPLIT_SIZES, **(sizes or {}))
    unknown = set(sizes) - set(SPLIT_KEYS)
    if unknown:
        raise ConfigError(f"unknown splits {sorted(unknown)}; expected some of {sorted(SPLIT_KEYS)}")
    if other_noise is None:
        other_noise = OTHER_NOISE_SCALE * spec.noise
    if other_noise < 0:
        raise ConfigError(f"other_noise must be >= 0, got {other_noise}")
    splits = {}
    for split, n_utts in sizes.items():
        split_seed = derive_seed(seed, SPLIT_KEYS[split])
        split_spec = attr.evolve(spec, noise=other_noise) if split == 'test_other' else spec
        logger.info("Generating %s split: %d utterances", split, n_utts)
        splits[split] = gen_corpus(
            split_spec, n_utts, len_range, split_seed,
            min_homophone_frac=0.4 if split == 'homophone' else None, progress=progress)
    return splits


#
# Corpus archives.
#

CORPUS_MAGIC = b'PALCORP1'
CORPUS_VERSION = 1


@attr.s
class Corpus:
    items = attr.ib()
    vocab_size = attr.ib()
    n_mels = attr.ib()
    fingerprint = attr.ib(default=None)

    def __len__(self):
        return len(self.items)

    def __iter__(self):
        return iter(self.items)


def _u32(*values):
    return np.array(values, dtype='<u4').tobytes()


def corpus_to_bytes(items, vocab_size):
    n_mels = items[0][0].dim if items else 0
    buf = io.BytesIO()
    buf.write(CORPUS_MAGIC)
    buf.write(_u32(CORPUS_VERSION, vocab_size, n_mels))
    for feats, labels in items:
        buf.write(_u32(len(labels)))
        buf.write(labels.tokens.astype('<u2').tobytes())
        buf.write(_u32(*feats.frames.shape))
        buf.write(feats.frames.astype('<f4').tobytes())
    return buf.getvalue()


def corpus_fingerprint(items, vocab_size):
    return hashlib.sha256(corpus_to_bytes(items, vocab_size)).hexdigest()[:16]


def save_corpus(filename, items, vocab_size):
    data = corpus_to_bytes(items, vocab_size)
    with open(filename, 'wb') as f:
        f.write(data)
    return hashlib.sha256(data).hexdigest()[:16]


def load_corpus(filename):
    with open(filename, 'rb') as f:
        data = f.read()
    if data[:8] != CORPUS_MAGIC:
        raise InputError(f"{filename} is not a corpus archive")
    version, vocab_size, n_mels = (int(v) for v in np.frombuffer(data, '<u4', 3, 8))
    if version != CORPUS_VERSION:
        raise InputError(f"{filename}: unsupported corpus version {version}")
    pos = 20
    items = []
    while pos < len(data):
        n_labels = int(np.frombuffer(data, '<u4', 1, pos)[0])
        pos += 4
        tokens = np.frombuffer(data, '<u2', n_labels, pos).astype(np.int64)
        pos += 2 * n_labels
        T, D = (int(v) for v in np.frombuffer(data, '<u4', 2, pos))
        pos += 8
        frames = np.frombuffer(data, '<f4', T * D, pos).reshape(T, D)
        pos += 4 * T * D
        items.append((FeatureSequence(frames.copy()), LabelSequence(tokens, vocab_size=int(vocab_size))))
    return Corpus(items=items, vocab_size=int(vocab_size), n_mels=int(n_mels),
                  fingerprint=hashlib.sha256(data).hexdigest()[:16])


#
# Log-mel filterbanks.
#

@attr.s(frozen=True)
class FbankConfig:
    n_mels = attr.ib(default=DEFAULT_N_MELS)
    n_fft = attr.ib(default=512)
    window_ms = attr.ib(default=25)
    shift_ms = attr.ib(default=10)
    floor = attr.ib(default=LOG_FLOOR)

    def window_length(self, sample_rate):
        return int(round(sample_rate * self.window_ms / 1000))

    def hop_length(self, sample_rate):
        return int(round(sample_rate * self.shift_ms / 1000))


def hz_to_mel(f):
    return 2595. * np.log10(1. + np.asarray(f) / 700.)


def mel_to_hz(m):
    return 700. * (10. ** (np.asarray(m) / 2595.) - 1.)


def _mel_points(n_mels, sample_rate, f_min=0., f_max=None):
    f_max = sample_rate / 2 if f_max is None else f_max
    return mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))


def mel_centers(n_mels, sample_rate, f_min=0., f_max=None):
    return _mel_points(n_mels, sample_rate, f_min, f_max)[1:-1]


def mel_filterbank(n_mels, n_fft, sample_rate, f_min=0., f_max=None):
    """Triangular HTK-mel filters, shape n_mels x (n_fft // 2 + 1)."""
    hz = _mel_points(n_mels, sample_rate, f_min, f_max)
    bins = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lower, center, upper = hz[:-2, None], hz[1:-1, None], hz[2:, None]
    rising = (bins[None, :] - lower) / (center - lower)
    falling = (upper - bins[None, :]) / (upper - center)
    return np.maximum(0., np.minimum(rising, falling))


def log_mel(w, config=FbankConfig()):
    win = config.window_length(w.sample_rate)
    hop = config.hop_length(w.sample_rate)
    n = len(w.samples)
    if n < win:
        raise InputTooShortError(f"waveform of {n} samples is shorter than one {win}-sample window")
    T = (n - win) // hop + 1
    idx = hop * np.arange(T)[:, None] + np.arange(win)[None, :]
    frames = w.samples[idx] * get_window('hann', win)
    power = np.abs(np.fft.rfft(frames, n=config.n_fft, axis=1)) ** 2
    mel = power @ mel_filterbank(config.n_mels, config.n_fft, w.sample_rate).T
    return FeatureSequence(np.log(np.maximum(mel, config.floor)),
                           frame_shift_ms=config.shift_ms, window_ms=config.window_ms)


def read_wav(filename):
    sample_rate, data = wavfile.read(filename)
    if data.dtype != np.int16 or data.ndim != 1:
        raise InputError(f"{filename}: expected 16-bit PCM mono, got {data.dtype} with shape {data.shape}")
    return Waveform(data.astype(np.float64) / 32768., sample_rate=sample_rate)
