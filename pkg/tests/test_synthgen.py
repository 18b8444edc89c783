import numpy as np
import pytest

from enginesed import synthgen as SG
from enginesed.errors import ConfigError
from enginesed.signal_io import load_manifest, load_record, prepare_record


# ---------------------------------------------------------------------------
# band-energy scorer used as the separability oracle

def band_energy_score(signal, rate, band, win_s=1.0, hop_s=0.5):
    """max/median ratio of in-band energy over sliding windows (dB)."""
    n_win = int(win_s * rate)
    n_hop = int(hop_s * rate)
    energies = []
    for start in range(0, len(signal) - n_win + 1, n_hop):
        seg = signal[start:start + n_win].astype(np.float64)
        spectrum = np.abs(np.fft.rfft(seg)) ** 2
        freqs = np.fft.rfftfreq(n_win, 1.0 / rate)
        mask = (freqs >= band[0]) & (freqs <= band[1])
        energies.append(spectrum[mask].sum() + 1e-30)
    energies = np.asarray(energies)
    return 10 * np.log10(energies.max() / np.median(energies))


def record_class_score(record, sig):
    if sig.oracle_modality == "vibration":
        return band_energy_score(record.vibration[0], record.vibration_rate,
                                 sig.oracle_band, win_s=2.0, hop_s=1.0)
    return band_energy_score(record.audio, record.audio_rate, sig.oracle_band)


# ---------------------------------------------------------------------------
# generation basics

def test_generate_record_deterministic():
    scene = SG.SceneConfig()
    a = SG.generate_record(scene, seed=7)
    b = SG.generate_record(scene, seed=7)
    np.testing.assert_array_equal(a.audio, b.audio)
    np.testing.assert_array_equal(a.vibration, b.vibration)
    assert [(e.class_id, e.onset, e.offset) for e in a.strong_events] == \
           [(e.class_id, e.onset, e.offset) for e in b.strong_events]


def test_generate_record_shapes_and_rates():
    record = SG.generate_record(SG.SceneConfig(), seed=1)
    assert record.audio_rate == 44100
    assert record.vibration_rate == 100
    assert record.audio.shape == (30 * 44100,)
    assert record.vibration.shape == (3, 30 * 100)
    assert record.strong_events, "every record carries at least one event"
    for ev in record.strong_events:
        assert 0.0 <= ev.onset < ev.offset <= 30.0
    weak = record.weak_labels
    assert weak.shape == (10,)
    assert set(np.flatnonzero(weak)) == {ev.class_id for ev in record.strong_events}


def test_forced_knock_event_snr_oracle():
    # stationary scene (no start phase): the (0,5) window is a clean baseline
    snr_db = 15.0
    scene = SG.SceneConfig(start_phase=False, polyphony=False,
                           forced_events=[(0, 5.0, 14.0)], snr_override_db=snr_db)
    record = SG.generate_record(scene, seed=3)
    band = SG.SIGNATURES[0].audio_band

    def window_band_energy(lo_s, hi_s):
        seg = record.audio[int(lo_s * 44100):int(hi_s * 44100)].astype(np.float64)
        spectrum = np.abs(np.fft.rfft(seg)) ** 2
        freqs = np.fft.rfftfreq(len(seg), 1 / 44100)
        mask = (freqs >= band[0]) & (freqs <= band[1])
        return spectrum[mask].sum() / len(seg)

    baseline = window_band_energy(0.0, 5.0)
    event = window_band_energy(5.0, 14.0)
    measured_db = 10 * np.log10(event / baseline)
    assert abs(measured_db - snr_db) < 2.0


def test_startup_event_requires_start_phase():
    scene = SG.SceneConfig(start_phase=False,
                           forced_events=[(8, 1.0, 2.2)])
    with pytest.raises(ConfigError):
        SG.generate_record(scene, seed=0)
    mix = [0.0] * 10
    mix[9] = 1.0
    with pytest.raises(ConfigError):
        SG.generate_record(SG.SceneConfig(start_phase=False, class_mix=mix), seed=0)


def test_startup_classes_stay_inside_start_window():
    hits = 0
    for seed in range(60):
        mix = [0.0] * 10
        mix[8] = 1.0
        mix[9] = 1.0
        record = SG.generate_record(SG.SceneConfig(class_mix=mix), seed=seed)
        for ev in record.strong_events:
            assert ev.class_id in (8, 9)
            assert ev.onset >= 0.5          # after power-on
            assert ev.offset <= 7.0         # inside crank/start region
            hits += 1
    assert hits >= 60


def test_polyphony_produces_overlaps_somewhere():
    overlaps = 0
    for seed in range(100):
        record = SG.generate_record(SG.SceneConfig(extra_event_rate=1.5), seed=seed)
        events = sorted(record.strong_events, key=lambda e: e.onset)
        for first, second in zip(events, events[1:]):
            if second.onset < first.offset and second.class_id != first.class_id:
                overlaps += 1
    assert overlaps > 0


def test_no_polyphony_keeps_events_disjoint():
    for seed in range(40):
        record = SG.generate_record(
            SG.SceneConfig(polyphony=False, extra_event_rate=2.0), seed=seed)
        events = sorted(record.strong_events, key=lambda e: e.onset)
        for first, second in zip(events, events[1:]):
            assert second.onset >= first.offset - 1e-9


# ---------------------------------------------------------------------------
# corpus generation

@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    manifest = SG.generate_corpus(str(out), 220, seed=5)
    return manifest


def test_corpus_layout_and_split(corpus):
    assert len(corpus.records) == 220
    assert corpus.class_names == SG.CLASS_NAMES
    splits = {r.split for r in corpus.records}
    assert splits == {"train", "valid", "test"}
    n_train = sum(r.split == "train" for r in corpus.records)
    assert 0.6 < n_train / 220 < 0.8


def test_corpus_mean_durations_match_targets(corpus):
    durations = {c: [] for c in range(10)}
    for entry in corpus.records:
        record = load_record(entry, corpus)
        for ev in record.strong_events:
            durations[ev.class_id].append(ev.duration)
    for c, values in durations.items():
        if len(values) < 8:
            continue
        mean = float(np.mean(values))
        target = SG.MEAN_DURATIONS[c]
        assert abs(mean - target) <= 0.15 * target, (SG.CLASS_NAMES[c], mean)


def test_corpus_startup_rattle_duration_example(corpus):
    values = []
    for entry in corpus.records:
        record = load_record(entry, corpus)
        values.extend(ev.duration for ev in record.strong_events
                      if ev.class_id == 8)
    if len(values) < 5:
        pytest.skip("too few startup-rattle events in this draw")
    assert abs(float(np.mean(values)) - 1.21) <= 0.18


def test_corpus_records_load_and_prepare(corpus):
    entry = corpus.records[0]
    record = prepare_record(load_record(entry, corpus))
    assert record.vibration_rate == 416
    assert record.audio.shape == (30 * 44100,)
    assert record.vibration.shape == (3, 30 * 416)


def test_weak_corpus_five_broad_classes(tmp_path):
    manifest = SG.generate_corpus(str(tmp_path), 12, seed=9, label_mode="weak")
    assert manifest.class_names == SG.BROAD_NAMES
    assert manifest.label_mode == "weak"
    record = load_record(manifest.records[0], manifest)
    assert record.weak_labels.shape == (5,)
    assert not record.strong_events


def test_corpus_seed_determinism(tmp_path):
    import hashlib

    def tree_hash(root):
        h = hashlib.sha256()
        import os
        for dirpath, _, files in sorted(os.walk(root)):
            for name in sorted(files):
                with open(os.path.join(dirpath, name), "rb") as fh:
                    h.update(name.encode())
                    h.update(fh.read())
        return h.hexdigest()

    a = tmp_path / "a"
    b = tmp_path / "b"
    SG.generate_corpus(str(a), 12, seed=7)
    SG.generate_corpus(str(b), 12, seed=7)
    assert tree_hash(a) == tree_hash(b)
    c = tmp_path / "c"
    SG.generate_corpus(str(c), 12, seed=8)
    assert tree_hash(a) != tree_hash(c)


def test_corpus_too_small_rejected(tmp_path):
    with pytest.raises(ConfigError):
        SG.generate_corpus(str(tmp_path), 5, seed=0)


# ---------------------------------------------------------------------------
# separability: the learning task must be solvable from band energies

def test_band_energy_classifier_accuracy(corpus):
    subset = corpus.records[:120]
    scores = {c: [] for c in range(10)}
    labels = {c: [] for c in range(10)}
    for entry in subset:
        record = load_record(entry, corpus)
        present = {ev.class_id for ev in record.strong_events}
        for c, sig in enumerate(SG.SIGNATURES):
            scores[c].append(record_class_score(record, sig))
            labels[c].append(1 if c in present else 0)
    for c in range(10):
        y = np.asarray(labels[c])
        s = np.asarray(scores[c])
        if y.sum() < 3 or (1 - y).sum() < 3:
            continue
        best_acc = max(
            ((s >= thr) == y).mean()
            for thr in np.quantile(s, np.linspace(0.02, 0.98, 49))
        )
        assert best_acc > 0.9, (SG.CLASS_NAMES[c], best_acc)
