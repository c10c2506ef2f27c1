"""Shared fixtures: one small trained model stack reused across suites."""

from types import SimpleNamespace

import numpy as np
import pytest

from kinesis.detection import DetectorTrainConfig, train_detector
from kinesis.quality import ScoredSample, ScorerConfig, train_scorer
from kinesis.recognition import (
    ContrastiveConfig,
    EncoderArch,
    LabelSet,
    SeededRandomProvider,
    SignalEncoder,
    pretrain_contrastive,
)
from kinesis.signals import WindowConfig
from kinesis.synth import (
    SynthConfig,
    make_scored_segments,
    make_waveform_pool,
    relabel_binary,
    synthesize_dataset,
)

MOTION_LABELS = ["running", "jumping", "dribbling", "pivoting"]
REST_LABEL = "resting"


def draw_pool_samples(pool, labels, per_label, seed):
    rng = np.random.default_rng(seed)
    out = []
    for lab in labels:
        segs = pool.classes[lab]
        for _ in range(per_label):
            out.append((segs[int(rng.integers(len(segs)))].values, lab))
    return out


@pytest.fixture(scope="session")
def trained_stack():
    """Detector + aligned encoder + scorer trained on one waveform pool.

    Heavy enough to drive the session fixtures end to end, small enough to
    build once per test run (~30 s).
    """
    pool = make_waveform_pool(MOTION_LABELS, [REST_LABEL], seed=51,
                              segments_per_label=12, seconds_range=(1.0, 2.5))
    binary = relabel_binary(pool, set(MOTION_LABELS), {REST_LABEL})
    synth_cfg = SynthConfig(segments_per_sequence=(2, 5), blend_width=5,
                            length_range=(100, 250), motion_prob=0.5, seed=501)
    detector = train_detector(
        synthesize_dataset(binary, synth_cfg, 150),
        DetectorTrainConfig(epochs=3, batch_size=64, learning_rate=3e-3, seed=0,
                            window=WindowConfig(50, 25)),
    )

    provider = SeededRandomProvider(dim=512, seed=99)
    encoder = SignalEncoder.create(EncoderArch(), seed=0)
    pretrain_contrastive(
        encoder,
        draw_pool_samples(pool, MOTION_LABELS, 30, seed=1),
        provider,
        ContrastiveConfig(epochs=8, batch_size=48, learning_rate=1e-3, seed=0),
    )

    scored = [ScoredSample(seg, "dribbling", sc)
              for seg, sc in make_scored_segments("dribbling", 120, seed=61)]
    scorer = train_scorer(scored, encoder, provider, ScorerConfig(epochs=30, seed=0))

    return SimpleNamespace(
        pool=pool,
        binary_pool=binary,
        synth_cfg=synth_cfg,
        detector=detector,
        encoder=encoder,
        provider=provider,
        scorer=scorer,
        labels=LabelSet(MOTION_LABELS),
    )
