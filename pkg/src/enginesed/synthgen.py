"""Parametric synthetic engine recordings with exact fault-event labels.

Each scene builds a 30 s base signal pair (audio 44.1 kHz, vibration
100 Hz): the engine is off, cranks through a start phase, idles, then
accelerates 2-3 times. Fault events are injected as fixed, documented
formulas over disjoint spectral bands so every class stays separable at
desk scale:

  id  class             audio recipe                      vibration recipe
  0   engine_knock      10 Hz noise-burst comb, 700-1000  14-22 Hz comb
  1   belt_squeal       4.3 kHz tone with vibrato         -
  2   exhaust_noise     steady noise band 1200-1600       -
  3   unstable_idle     weak noise band 500-700           5-12 Hz wobble (strong)
  4   internal_tick     25 Hz comb, 2400-3000             -
  5   ambiguous_tick    15 Hz comb, 3300-3900             -
  6   accessory_noise   8 Hz AM tone at 2 kHz             -
  7   engine_rattle     35 Hz comb, 7000-9000             -
  8   startup_rattle    30 Hz comb, 5000-6500 (start)     25-45 Hz burst
  9   trouble_starting  3 Hz sputter, 40-120 (start)      1-3.5 Hz lurch (strong)

The engine-harmonic stack stays below ~600 Hz, so every audio event band
except the deliberately weak unstable-idle/trouble-starting low bands sees
only the white noise floor; event gain targets a per-event SNR against the
event window's own in-band background, so band-energy detectors see the
configured contrast. Vibration is emitted at 100 Hz; loading upsamples it
through the shared resample path.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .signal_io import (DatasetManifest, SoundEvent, WaveformRecord,
                        save_manifest, stratified_split, weak_from_events,
                        write_record)

AUDIO_RATE = 44100
VIB_RATE = 100
DURATION_S = 30.0

CLASS_NAMES = [
    "engine_knock", "belt_squeal", "exhaust_noise", "unstable_idle",
    "internal_tick", "ambiguous_tick", "accessory_noise", "engine_rattle",
    "startup_rattle", "trouble_starting",
]

MEAN_DURATIONS = [9.07, 12.00, 9.66, 4.40, 10.48, 9.58, 6.82, 5.25, 1.21, 2.09]

# relative event frequencies (train+valid+test counts of the reference data)
EVENT_COUNT_WEIGHTS = [745, 133, 648, 183, 296, 534, 1026, 1120, 278, 325]

# fine class -> broad pretraining class (synthetic-only mapping)
BROAD_NAMES = ["internal_mechanical", "accessory", "exhaust", "instability", "starting"]
FINE_TO_BROAD = {0: 0, 4: 0, 5: 0, 1: 1, 6: 1, 2: 2, 3: 3, 7: 3, 8: 4, 9: 4}


@dataclass(frozen=True)
class FaultSignature:
    class_id: int
    name: str
    audio_kind: str                 # comb_noise | tone | band_noise | am_tone | sputter
    audio_band: tuple[float, float]
    audio_rate_hz: float            # comb/AM/sputter modulation rate
    audio_snr_db: tuple[float, float]
    vib_kind: str                   # none | band_noise | comb_noise
    vib_band: tuple[float, float]
    vib_snr_db: tuple[float, float]
    mean_duration_s: float
    startup_only: bool
    oracle_modality: str            # band-energy sanity checks use this side
    oracle_band: tuple[float, float]


def _sig(cid, audio_kind, audio_band, rate, audio_snr, vib_kind, vib_band,
         vib_snr, startup, oracle_modality):
    band = vib_band if oracle_modality == "vibration" else audio_band
    return FaultSignature(
        class_id=cid, name=CLASS_NAMES[cid], audio_kind=audio_kind,
        audio_band=audio_band, audio_rate_hz=rate, audio_snr_db=audio_snr,
        vib_kind=vib_kind, vib_band=vib_band, vib_snr_db=vib_snr,
        mean_duration_s=MEAN_DURATIONS[cid], startup_only=startup,
        oracle_modality=oracle_modality, oracle_band=band,
    )


SIGNATURES = [
    _sig(0, "comb_noise", (700, 1000), 10.0, (14, 19), "comb_noise", (14, 22), (10, 14), False, "audio"),
    _sig(1, "tone", (4200, 4400), 0.0, (14, 19), "none", (0, 0), (0, 0), False, "audio"),
    _sig(2, "band_noise", (1200, 1600), 0.0, (14, 19), "none", (0, 0), (0, 0), False, "audio"),
    _sig(3, "band_noise", (500, 700), 0.0, (2, 5), "band_noise", (5, 12), (14, 20), False, "vibration"),
    _sig(4, "comb_noise", (2400, 3000), 25.0, (14, 19), "none", (0, 0), (0, 0), False, "audio"),
    _sig(5, "comb_noise", (3300, 3900), 15.0, (14, 19), "none", (0, 0), (0, 0), False, "audio"),
    _sig(6, "am_tone", (1900, 2100), 8.0, (14, 19), "none", (0, 0), (0, 0), False, "audio"),
    _sig(7, "comb_noise", (7000, 9000), 35.0, (14, 19), "none", (0, 0), (0, 0), False, "audio"),
    _sig(8, "comb_noise", (5000, 6500), 30.0, (14, 19), "band_noise", (25, 45), (10, 14), True, "audio"),
    _sig(9, "sputter", (40, 120), 3.0, (14, 19), "band_noise", (1.0, 3.5), (14, 20), True, "vibration"),
]


@dataclass
class SceneConfig:
    start_phase: bool = True
    polyphony: bool = True
    extra_event_rate: float = 0.7     # Poisson rate beyond the first event
    max_events: int = 3
    noise_floor: float = 0.003
    vib_noise_floor: float = 0.004
    base_gain: float = 0.05
    vib_base_gain: float = 0.04
    class_mix: list[float] | None = None
    forced_events: list[tuple[int, float, float]] | None = None  # (class, onset, offset)
    snr_override_db: float | None = None


# ---------------------------------------------------------------------------
# base scene

def _rpm_profile(rng, start_phase: bool, n_ctrl: int, ctrl_rate: float):
    """Piecewise RPM profile plus phase landmarks (t_on, start_end)."""
    t = np.arange(n_ctrl) / ctrl_rate
    if start_phase:
        t_on = rng.uniform(1.0, 2.0)
        start_dur = rng.uniform(3.0, 4.0)
    else:
        t_on, start_dur = 0.0, 0.0
    start_end = t_on + start_dur
    idle_rpm = rng.uniform(750, 950)
    crank_rpm = 250.0
    rpm = np.full(n_ctrl, idle_rpm)
    rpm[t < t_on] = 0.0
    in_start = (t >= t_on) & (t < start_end)
    rpm[in_start] = crank_rpm + 40.0 * np.sin(2 * np.pi * 4.0 * (t[in_start] - t_on))
    # ramp into idle over the last 20% of the start phase
    if start_phase:
        ramp = (t >= start_end - 0.2 * start_dur) & (t < start_end)
        frac = (t[ramp] - (start_end - 0.2 * start_dur)) / (0.2 * start_dur)
        rpm[ramp] = rpm[ramp] * (1 - frac) + idle_rpm * frac
    n_accel = rng.integers(2, 4)
    accel_zone = (start_end + 1.5, DURATION_S - 4.0)
    centers = np.sort(rng.uniform(*accel_zone, size=n_accel))
    for center in centers:
        peak = rng.uniform(2200, 3200)
        window = np.clip(1.0 - np.abs(t - center) / 0.9, 0.0, 1.0)
        rpm = np.maximum(rpm, idle_rpm + (peak - idle_rpm) * window)
    rpm[t < t_on] = 0.0
    return rpm, t_on, start_end


def _band_noise(rng, n: int, rate: float, lo: float, hi: float) -> np.ndarray:
    """White noise restricted to [lo, hi] Hz via FFT masking."""
    white = rng.standard_normal(n)
    spectrum = np.fft.rfft(white)
    freqs = np.fft.rfftfreq(n, d=1.0 / rate)
    spectrum[(freqs < lo) | (freqs > hi)] = 0.0
    return np.fft.irfft(spectrum, n)


def _comb_envelope(n: int, rate: float, mod_hz: float, duty: float = 0.3) -> np.ndarray:
    t = np.arange(n) / rate
    return (np.mod(t * mod_hz, 1.0) < duty).astype(np.float64)


def _fade(signal: np.ndarray, rate: float, ramp_s: float = 0.05) -> np.ndarray:
    n_ramp = min(int(ramp_s * rate), len(signal) // 2)
    if n_ramp > 0:
        ramp = 0.5 * (1 - np.cos(np.pi * np.arange(n_ramp) / n_ramp))
        signal[:n_ramp] *= ramp
        signal[-n_ramp:] *= ramp[::-1]
    return signal


def _event_audio(sig: FaultSignature, rng, n: int) -> np.ndarray:
    t = np.arange(n) / AUDIO_RATE
    lo, hi = sig.audio_band
    if sig.audio_kind == "tone":
        center = 0.5 * (lo + hi)
        out = np.sin(2 * np.pi * center * t + 3.0 * np.sin(2 * np.pi * 5.0 * t))
    elif sig.audio_kind == "band_noise":
        out = _band_noise(rng, n, AUDIO_RATE, lo, hi)
    elif sig.audio_kind == "comb_noise":
        out = _band_noise(rng, n, AUDIO_RATE, lo, hi) * _comb_envelope(n, AUDIO_RATE, sig.audio_rate_hz)
    elif sig.audio_kind == "am_tone":
        center = 0.5 * (lo + hi)
        out = np.sin(2 * np.pi * center * t) * (0.6 + 0.4 * np.sin(2 * np.pi * sig.audio_rate_hz * t))
    elif sig.audio_kind == "sputter":
        out = _band_noise(rng, n, AUDIO_RATE, lo, hi) * (
            0.55 + 0.45 * np.sin(2 * np.pi * sig.audio_rate_hz * t))
    else:
        raise ConfigError(f"unknown audio recipe {sig.audio_kind!r}")
    return _fade(out, AUDIO_RATE)


def _event_vibration(sig: FaultSignature, rng, n: int) -> np.ndarray | None:
    if sig.vib_kind == "none" or n < 8:
        return None
    lo, hi = sig.vib_band
    out = _band_noise(rng, n, VIB_RATE, lo, hi)
    if sig.vib_kind == "comb_noise":
        out = out * _comb_envelope(n, VIB_RATE, sig.audio_rate_hz)
    return _fade(out, VIB_RATE)


def _band_power(segment: np.ndarray, rate: float, lo: float, hi: float) -> float:
    spectrum = np.fft.rfft(segment)
    freqs = np.fft.rfftfreq(len(segment), d=1.0 / rate)
    mask = (freqs >= lo) & (freqs <= hi)
    return float((np.abs(spectrum[mask]) ** 2).sum()) / max(len(segment), 1) ** 2


def _scaled_injection(event_sig, base, start_idx, rate, band, snr_db):
    """Gain so the event's in-band power sits snr_db above the event
    window's own in-band background."""
    n = len(event_sig)
    window = base[start_idx:start_idx + n]
    p_ref = max(_band_power(window, rate, *band), 1e-18)
    p_event = max(_band_power(event_sig, rate, *band), 1e-18)
    gain = np.sqrt((10.0 ** (snr_db / 10.0) - 1.0) * p_ref / p_event)
    return event_sig * gain


# ---------------------------------------------------------------------------
# record generation

def _sample_duration(sig: FaultSignature, rng) -> float:
    mu = sig.mean_duration_s
    d = rng.normal(mu, 0.2 * mu)
    return float(np.clip(d, max(0.5 * mu, 0.15), 1.5 * mu))


def _place_events(scene: SceneConfig, rng, t_on: float, start_end: float):
    mix = np.asarray(scene.class_mix if scene.class_mix is not None
                     else EVENT_COUNT_WEIGHTS, dtype=np.float64)
    if len(mix) != len(CLASS_NAMES) or mix.sum() <= 0:
        raise ConfigError("class_mix must be 10 non-negative weights")
    mix = mix / mix.sum()
    n_events = 1 + min(int(rng.poisson(scene.extra_event_rate)), scene.max_events - 1)
    classes = rng.choice(len(CLASS_NAMES), size=min(n_events, (mix > 0).sum()),
                         replace=False, p=mix)
    placed: list[SoundEvent] = []
    for cid in classes:
        sig = SIGNATURES[cid]
        if sig.startup_only:
            if not scene.start_phase:
                raise ConfigError(
                    f"scene has no start phase but class {sig.name} was requested"
                )
            window = (t_on + 0.1, start_end - 0.1)
        else:
            window = (start_end + 0.5, DURATION_S - 0.3)
        duration = min(_sample_duration(sig, rng), (window[1] - window[0]) * 0.9)
        if duration <= 0.1:
            continue
        for _ in range(12):
            onset = rng.uniform(window[0], window[1] - duration)
            candidate = SoundEvent(int(cid), onset, onset + duration)
            if scene.polyphony or not any(
                candidate.onset < ev.offset and candidate.offset > ev.onset
                for ev in placed
            ):
                placed.append(candidate)
                break
    return sorted(placed, key=lambda ev: ev.onset)


def generate_record(scene: SceneConfig, seed: int, record_id: str | None = None) -> WaveformRecord:
    """One 30 s paired recording with embedded labeled fault events.

    Vibration is produced at 100 Hz (3 axes); loading resamples it to
    416 Hz through the shared signal path.
    """
    rng = np.random.default_rng(seed)
    n_audio = int(DURATION_S * AUDIO_RATE)
    n_vib = int(DURATION_S * VIB_RATE)

    ctrl_rate = 100.0
    rpm_ctrl, t_on, start_end = _rpm_profile(rng, scene.start_phase,
                                             int(DURATION_S * ctrl_rate), ctrl_rate)
    t_ctrl = np.arange(len(rpm_ctrl)) / ctrl_rate

    # audio base: harmonic stack of the firing frequency (rpm/60 * 2)
    t_audio = np.arange(n_audio) / AUDIO_RATE
    f0 = np.interp(t_audio, t_ctrl, rpm_ctrl) / 60.0 * 2.0
    amp = np.interp(t_audio, t_ctrl, np.where(rpm_ctrl > 0, 1.0, 0.0))
    phase = 2 * np.pi * np.cumsum(f0) / AUDIO_RATE
    audio = np.zeros(n_audio)
    for k in range(1, 6):
        audio += np.sin(k * phase) / k
    audio *= scene.base_gain * amp
    audio += scene.noise_floor * rng.standard_normal(n_audio)

    # vibration base: shaft frequency (rpm/60) per axis
    t_vib = np.arange(n_vib) / VIB_RATE
    f0_vib = np.interp(t_vib, t_ctrl, rpm_ctrl) / 60.0
    amp_vib = np.interp(t_vib, t_ctrl, np.where(rpm_ctrl > 0, 1.0, 0.0))
    phase_vib = 2 * np.pi * np.cumsum(f0_vib) / VIB_RATE
    axis_gains = (1.0, 0.7, 0.5)
    vibration = np.stack([
        g * scene.vib_base_gain * amp_vib * (np.sin(phase_vib) + 0.5 * np.sin(2 * phase_vib))
        + scene.vib_noise_floor * rng.standard_normal(n_vib)
        for g in axis_gains
    ])

    if scene.forced_events is not None:
        events = [SoundEvent(c, on, off) for c, on, off in scene.forced_events]
        for ev in events:
            if SIGNATURES[ev.class_id].startup_only and not scene.start_phase:
                raise ConfigError(
                    f"scene has no start phase but class {CLASS_NAMES[ev.class_id]} was forced"
                )
    else:
        events = _place_events(scene, rng, t_on, start_end)

    for ev in events:
        sig = SIGNATURES[ev.class_id]
        a_start = int(ev.onset * AUDIO_RATE)
        a_n = min(int(ev.duration * AUDIO_RATE), n_audio - a_start)
        snr = (scene.snr_override_db if scene.snr_override_db is not None
               else rng.uniform(*sig.audio_snr_db))
        event_audio = _event_audio(sig, rng, a_n)
        audio[a_start:a_start + a_n] += _scaled_injection(
            event_audio, audio, a_start, AUDIO_RATE, sig.audio_band, snr)
        v_sig_n = min(int(ev.duration * VIB_RATE), n_vib - int(ev.onset * VIB_RATE))
        event_vib = _event_vibration(sig, rng, v_sig_n)
        if event_vib is not None:
            v_start = int(ev.onset * VIB_RATE)
            vsnr = (scene.snr_override_db if scene.snr_override_db is not None
                    else rng.uniform(*sig.vib_snr_db))
            scaled = _scaled_injection(event_vib, vibration[0], v_start,
                                       VIB_RATE, sig.vib_band, vsnr)
            for axis, g in enumerate(axis_gains):
                vibration[axis, v_start:v_start + v_sig_n] += g * scaled

    peak = np.abs(audio).max()
    if peak > 0.95:
        audio *= 0.95 / peak

    return WaveformRecord(
        id=record_id or f"rec{seed:06d}",
        audio=audio.astype(np.float32),
        audio_rate=AUDIO_RATE,
        vibration=vibration.astype(np.float32),
        vibration_rate=VIB_RATE,
        strong_events=events,
        weak_labels=weak_from_events(events, len(CLASS_NAMES)),
    )


# ---------------------------------------------------------------------------
# corpus generation

def broad_weak_labels(events: list[SoundEvent]) -> np.ndarray:
    flags = np.zeros(len(BROAD_NAMES), dtype=np.float32)
    for ev in events:
        flags[FINE_TO_BROAD[ev.class_id]] = 1.0
    return flags


def generate_corpus(out_dir: str, n_records: int, seed: int = 0,
                    scene: SceneConfig | None = None,
                    label_mode: str = "strong",
                    fractions: tuple[float, float, float] = (0.70, 0.15, 0.15),
                    audio_encoding: str = "int16") -> DatasetManifest:
    """Write records, labels and a stratified-split manifest to `out_dir`.

    label_mode="weak" emits the 5 broad-class weak labels used for
    pretraining corpora; "strong" emits full event labels for the 10 fine
    classes.
    """
    if n_records < 10:
        raise ConfigError(f"corpus needs at least 10 records, got {n_records}")
    if label_mode not in ("strong", "weak"):
        raise ConfigError(f"unknown label mode {label_mode!r}")
    scene = scene or SceneConfig()
    os.makedirs(out_dir, exist_ok=True)
    class_names = BROAD_NAMES if label_mode == "weak" else CLASS_NAMES

    seed_seq = np.random.SeedSequence(seed)
    record_seeds = seed_seq.generate_state(n_records, dtype=np.uint32)
    entries = []
    weights = []
    for i in range(n_records):
        record = generate_record(scene, int(record_seeds[i]), record_id=f"rec{i:05d}")
        if label_mode == "weak":
            record.weak_labels = broad_weak_labels(record.strong_events)
            record.strong_events = []
            weights.append((record.id, record.weak_labels.copy()))
        else:
            counts = np.zeros(len(CLASS_NAMES), dtype=np.float64)
            for ev in record.strong_events:
                counts[ev.class_id] += 1
            weights.append((record.id, counts))
        entries.append(write_record(out_dir, record, class_names, label_mode,
                                    audio_encoding))
    assignment = stratified_split(weights, fractions, seed)
    for entry in entries:
        entry.split = assignment[entry.id]
    manifest = DatasetManifest(
        class_names=list(class_names),
        records=entries,
        label_mode=label_mode,
        split_fractions=fractions,
        root=out_dir,
    )
    save_manifest(os.path.join(out_dir, "manifest.json"), manifest)
    return manifest
