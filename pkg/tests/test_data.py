import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sedlab.data import (
    CLIP_SAMPLES,
    AnnotationParseError,
    AudioClip,
    ClassVocabulary,
    DatasetBundle,
    EventAnnotation,
    EventBank,
    Strong,
    Unlabeled,
    Weak,
    fit_to_clip,
    read_strong_annotations,
    read_wav,
    read_weak_annotations,
    split_event_bank,
    write_strong_annotations,
    write_wav,
)

VOCAB = ClassVocabulary(("Speech", "Dog", "Cat"))


def _bank(counts):
    fg, ids = [], []
    for c, n in enumerate(counts):
        for i in range(n):
            fg.append((c, np.full(100, c + i / 100)))
            ids.append(f"c{c}_{i}")
    return EventBank(fg, [np.ones(10)], ids)


def test_vocabulary_defaults_and_validation():
    vocab = ClassVocabulary.default()
    assert len(vocab) == 10 and vocab.names[3] == "class_3"
    with pytest.raises(ValueError):
        ClassVocabulary(("a", "a"))
    with pytest.raises(ValueError):
        ClassVocabulary(())


@pytest.mark.parametrize("onset,offset", [(-0.1, 1.0), (2.0, 2.0), (3.0, 1.0)])
def test_event_annotation_rejects_bad_spans(onset, offset):
    with pytest.raises(ValueError):
        EventAnnotation(onset, offset, 0)


def test_clip_rejects_event_beyond_duration():
    with pytest.raises(ValueError):
        AudioClip("a.wav", np.zeros(16000), Strong((EventAnnotation(0.5, 1.5, 0),)))


def test_fit_to_clip_pads_and_rejects_long_audio():
    out = fit_to_clip(np.ones(5))
    assert len(out) == CLIP_SAMPLES and out[:5].sum() == 5 and out[5:].sum() == 0
    with pytest.raises(ValueError):
        fit_to_clip(np.ones(CLIP_SAMPLES + 1))


def test_bundle_enforces_one_granularity_per_subset():
    strong = AudioClip("s.wav", np.zeros(CLIP_SAMPLES), Strong(()))
    weak = AudioClip("w.wav", np.zeros(CLIP_SAMPLES), Weak({1}))
    DatasetBundle([strong], [weak], [AudioClip("u.wav", np.zeros(10))], [strong])
    with pytest.raises(ValueError):
        DatasetBundle(synthetic_strong=[weak])
    with pytest.raises(ValueError):
        DatasetBundle(unlabeled=[strong])


def test_split_ninety_ten():
    first, second = split_event_bank(_bank([10, 10]), 0.9, seed=1)
    for c in (0, 1):
        assert sum(1 for k, _ in first.foreground if k == c) == 9
        assert sum(1 for k, _ in second.foreground if k == c) == 1


def test_split_half_of_two():
    first, second = split_event_bank(_bank([2]), 0.5, seed=0)
    assert len(first) == 1 and len(second) == 1


def test_split_is_deterministic_and_seed_dependent():
    bank = _bank([10, 7, 5])
    a = split_event_bank(bank, 0.7, seed=3)
    b = split_event_bank(bank, 0.7, seed=3)
    assert a[0].foreground_ids == b[0].foreground_ids
    assert a[1].foreground_ids == b[1].foreground_ids
    other = split_event_bank(bank, 0.7, seed=4)
    assert other[0].foreground_ids != a[0].foreground_ids


@given(st.lists(st.integers(2, 12), min_size=1, max_size=5), st.floats(0.05, 0.95), st.integers(0, 10**6))
@settings(max_examples=60, deadline=None)
def test_split_partitions_every_class(counts, ratio, seed):
    bank = _bank(counts)
    first, second = split_event_bank(bank, ratio, seed)
    assert set(first.foreground_ids).isdisjoint(second.foreground_ids)
    assert sorted(first.foreground_ids + second.foreground_ids) == sorted(bank.foreground_ids)
    for c, n in enumerate(counts):
        assert sum(1 for k, _ in second.foreground if k == c) >= 1
        assert sum(1 for k, _ in first.foreground if k == c) >= 1


def test_split_rejects_singleton_class():
    with pytest.raises(ValueError, match="class not splittable"):
        split_event_bank(_bank([3, 1]), 0.9, seed=0)


def test_strong_row_format():
    clip = AudioClip("a.wav", np.zeros(CLIP_SAMPLES), Strong((EventAnnotation(1.0, 3.5, 0),)))
    text = write_strong_annotations([clip], VOCAB)
    assert "a.wav\t1.000\t3.500\tSpeech" in text.splitlines()


def test_strong_empty_event_list_writes_no_rows():
    clip = AudioClip("a.wav", np.zeros(CLIP_SAMPLES), Strong(()))
    assert write_strong_annotations([clip], VOCAB, header=False).strip() == ""


def test_strong_parse_error_reports_line_number():
    text = "filename\tonset\toffset\tevent_label\na.wav\t1.0\t2.0\tSpeech\nb.wav\tx\t2.0\tDog\n"
    with pytest.raises(AnnotationParseError, match="line 3"):
        read_strong_annotations(text, VOCAB)
    with pytest.raises(AnnotationParseError, match="line 1"):
        read_strong_annotations("a.wav\t1.0\t2.0\n", VOCAB)
    with pytest.raises(AnnotationParseError, match="line 1"):
        read_strong_annotations("a.wav\t1.0\t2.0\tHorse\n", VOCAB)


@st.composite
def strong_tables(draw):
    table = {}
    for i in range(draw(st.integers(1, 100))):
        events = []
        for _ in range(draw(st.integers(0, 4))):
            onset = draw(st.floats(0, 9.0))
            dur = draw(st.floats(0.01, 10.0 - onset))
            events.append(EventAnnotation(onset, onset + dur, draw(st.integers(0, 2))))
        table[f"clip_{i}.wav"] = events
    return table


@given(strong_tables())
@settings(max_examples=40, deadline=None)
def test_strong_round_trip(table):
    back = read_strong_annotations(write_strong_annotations(table, VOCAB), VOCAB)
    for name, events in table.items():
        got = back.get(name, [])
        want = sorted(events, key=lambda e: (e.onset, e.class_id))
        assert len(got) == len(want)
        for g, w in zip(got, want):
            assert g.class_id == w.class_id
            assert abs(g.onset - w.onset) <= 1e-3 and abs(g.offset - w.offset) <= 1e-3


def test_weak_row_uses_vocabulary_order():
    from sedlab.data import write_weak_annotations

    clip = AudioClip("a.wav", np.zeros(10), Weak({1, 0}))
    assert write_weak_annotations([clip], VOCAB, header=False).strip() == "a.wav\tSpeech,Dog"


def test_weak_without_tags_is_rejected():
    from sedlab.data import write_weak_annotations

    with pytest.raises(ValueError, match="weak clip with no tags"):
        write_weak_annotations({"a.wav": frozenset()}, VOCAB)


@given(st.dictionaries(st.from_regex(r"[a-z]{1,8}\.wav", fullmatch=True),
                       st.frozensets(st.integers(0, 2), min_size=1), max_size=30))
@settings(max_examples=50, deadline=None)
def test_weak_round_trip(table):
    from sedlab.data import write_weak_annotations

    assert read_weak_annotations(write_weak_annotations(table, VOCAB), VOCAB) == table


def test_weak_parse_error():
    with pytest.raises(AnnotationParseError, match="line 2"):
        read_weak_annotations("filename\tevent_labels\na.wav\n", VOCAB)


def test_wav_round_trip(tmp_path):
    x = np.sin(np.linspace(0, 100, 16000)) * 0.5
    write_wav(tmp_path / "a.wav", x)
    y, sr = read_wav(tmp_path / "a.wav")
    assert sr == 16000 and np.max(np.abs(x - y)) < 1 / 32767


def test_unlabeled_clip_default():
    clip = AudioClip("u.wav", np.zeros(4))
    assert isinstance(clip.labels, Unlabeled)
    with pytest.raises(ValueError):
        AudioClip("bad.wav", np.array([0.0, np.nan]))
