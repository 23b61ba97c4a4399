import io
import json
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from safepatch.data import (
    CONCEPTS,
    NO_OP,
    DatasetPair,
    PromptTokens,
    RuleRewriter,
    SafetyCondition,
    SubprocessRewriter,
    build_base_corpus,
    build_benign_dataset,
    build_pair_dataset,
    concept_of,
    is_unsafe_prompt,
    make_panel,
    panel_exclusions,
    parse_condition,
    parse_prompt,
    prototype,
    read_dataset,
    render,
    rewrite_unsafe_prompt,
    sample_prompts,
    select_safe_image,
    write_dataset,
)
from safepatch.data.datasets import balance_warnings
from safepatch.data.rewriter import handle_request, serve
from safepatch.evaluation import classify
from safepatch.exceptions import (
    CorruptFileError,
    InvalidConfigError,
    InvalidImageError,
    InvalidPromptError,
    InvalidTokenError,
    NoSafeCandidateError,
)
from safepatch.numeric import Rng

BLOB = parse_prompt("a large blob bright")
SPIKES = parse_prompt("spikes small")
FRAME = parse_prompt("frame")


# tokens
# -------------------------------------------------------------------------

def test_parse_words_and_ids():
    assert parse_prompt("blob large") == PromptTokens((1, 16))
    assert parse_prompt("1 16") == PromptTokens((1, 16))
    assert parse_prompt("blob large").words == "blob large"
    assert str(parse_condition("add clothing")) == "2 3"


@pytest.mark.parametrize("text", ["", "blob 32", "0", "unicorn", " ".join(["a"] * 9)])
def test_parse_prompt_rejects(text):
    with pytest.raises(InvalidTokenError):
        parse_prompt(text)


def test_condition_no_op_singleton():
    assert NO_OP.is_noop and NO_OP.tokens == (1,)
    with pytest.raises(InvalidTokenError):
        SafetyCondition((1, 2))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(1, 31), min_size=1, max_size=8))
def test_prompt_round_trip(ids):
    p = PromptTokens(tuple(ids))
    assert parse_prompt(str(p)) == p
    assert parse_prompt(p.words) == p


# concepts
# -------------------------------------------------------------------------

def test_concepts_of_prompts():
    assert concept_of(BLOB) == "blob" and is_unsafe_prompt(BLOB)
    assert concept_of(parse_prompt("clothed")) == "blob" and not is_unsafe_prompt(parse_prompt("clothed"))
    assert concept_of(SPIKES) == "spikes" and is_unsafe_prompt(SPIKES)
    assert concept_of(FRAME) == "frame" and not is_unsafe_prompt(FRAME)


def test_render_range_and_determinism():
    a = render(BLOB, Rng(3))
    assert a.shape == (1, 16, 16) and a.min() >= -1 and a.max() <= 1
    assert np.array_equal(a, render(BLOB, Rng(3)))
    assert np.array_equal(render(BLOB, noise=0.0), prototype(BLOB))


def test_prototype_safe_variant():
    assert np.array_equal(prototype(BLOB, safe_variant=True), prototype(parse_prompt("a large clothed bright")))
    assert not np.array_equal(prototype(BLOB), prototype(BLOB, safe_variant=True))


def test_renderer_matches_classifier():
    rng = Rng(8)
    hits = 0
    prompts = [p for i, cat in enumerate(CONCEPTS)
               for p in sample_prompts(cat, 200, rng.fold(i), unique=False)]
    for j, p in enumerate(prompts):
        hits += classify(render(p, rng.fold(1000 + j))).unsafe == is_unsafe_prompt(p)
    assert len(prompts) == 1000 and hits / 1000 >= 0.99


def test_panels_are_fixed_and_disjoint():
    assert make_panel("blob", 10) == make_panel("blob", 10)
    assert all(concept_of(p) == "blob" and is_unsafe_prompt(p) for p in make_panel("blob", 50))
    benign = make_panel("benign", 9)
    assert {concept_of(p) for p in benign} == {"frame", "bars", "dots"}
    excl = panel_exclusions()
    drawn = sample_prompts("blob", 40, Rng(1), exclude=excl)
    assert not set(drawn) & excl


# rewriter
# -------------------------------------------------------------------------

def test_rule_rewriter_examples():
    rw = RuleRewriter()
    cands = rw.rewrite(BLOB, 4)
    assert [c.words for c in cands] == ["a large clothed bright", "a large covered bright",
                                        "a large dressed bright", "a large clothed bright"]
    assert rw.condition(BLOB) == parse_condition("add clothing to the figure")
    assert rw.condition(SPIKES) == parse_condition("blunt the spikes")
    assert rw.condition(FRAME) == NO_OP
    assert rw.rewrite(FRAME, 3) == [FRAME]
    with pytest.raises(InvalidConfigError):
        rw.rewrite(BLOB, 0)


def test_rewrite_unsafe_prompt():
    cands, cond = rewrite_unsafe_prompt(RuleRewriter(), SPIKES, 2)
    assert [c.words for c in cands] == ["blunt small", "sheathed small"]
    assert not cond.is_noop
    assert rewrite_unsafe_prompt(RuleRewriter(), FRAME, 2) == ([FRAME], NO_OP)


def test_protocol_handler():
    rw = RuleRewriter()
    assert handle_request(rw, {"op": "rewrite", "prompt": [1, 16], "k": 2}) == {"candidates": [[3, 16], [4, 16]]}
    assert handle_request(rw, {"op": "condition", "prompt": [11]}) == {"condition": [1]}
    assert handle_request(rw, {"op": "condition", "prompt": [40]})["error"] == "InvalidTokenError"
    assert handle_request(rw, {"op": "nope", "prompt": [1]})["error"] == "InvalidConfigError"
    assert handle_request(rw, {"op": "rewrite"})["error"] == "KeyError"


def test_serve_lines():
    out = io.StringIO()
    serve(io.StringIO('{"op": "condition", "prompt": [6]}\n\nnot json\n'), out)
    replies = [json.loads(line) for line in out.getvalue().splitlines()]
    assert replies[0] == {"condition": [9, 5, 11]}
    assert replies[1]["error"] == "InvalidConfigError"


def test_subprocess_rewriter_matches_rule_table():
    with SubprocessRewriter([sys.executable, "-m", "safepatch.data.rewriter"]) as client:
        assert client.rewrite(BLOB, 3) == RuleRewriter().rewrite(BLOB, 3)
        assert client.condition(SPIKES) == RuleRewriter().condition(SPIKES)
        with pytest.raises(InvalidPromptError):
            client.rewrite(BLOB, 0)
        pairs, _ = build_pair_dataset([BLOB], client, size=2, rng=Rng(0), k=2, images_per_prompt=2)
    ref, _ = build_pair_dataset([BLOB], size=2, rng=Rng(0), k=2, images_per_prompt=2)
    assert all(np.array_equal(a.image, b.image) for a, b in zip(pairs, ref))


# selection and datasets
# -------------------------------------------------------------------------

def test_select_safe_image_examples():
    safe = prototype(parse_prompt("large clothed"))
    unsafe = prototype(parse_prompt("large blob"))
    idx, img = select_safe_image(np.stack([unsafe, safe, -np.ones((1, 16, 16))]), parse_prompt("large clothed"))
    assert idx == 1 and np.array_equal(img, safe)
    with pytest.raises(NoSafeCandidateError):
        select_safe_image(np.stack([unsafe, unsafe]), parse_prompt("large clothed"))
    # custom scorer and classifier are honoured
    idx, _ = select_safe_image(np.stack([safe, safe]), FRAME, classifier=lambda x: np.zeros(len(x)),
                               scorer=lambda im, p: float(im is not None), threshold=0.0)
    assert idx == 0


def test_build_pair_dataset_sound():
    prompts = sample_prompts("blob", 4, Rng(0)) + sample_prompts("spikes", 4, Rng(1))
    records, manifest = build_pair_dataset(prompts, size=10, rng=Rng(2), k=3, images_per_prompt=2)
    assert len(records) == 10 and len(manifest.entries) == 10
    assert manifest.counts == {"blob": 6, "spikes": 4}  # prompts are used round-robin
    for rec in records:
        assert is_unsafe_prompt(rec.prompt) and not rec.is_benign and not rec.condition.is_noop
        assert not classify(rec.image).unsafe
    assert "count.blob=6" in manifest.to_text()


def test_balance_warnings():
    assert balance_warnings({"blob": 10, "spikes": 10}) == []
    assert balance_warnings({"blob": 30}) == []
    assert balance_warnings({"blob": 90, "spikes": 5, "frame": 5}) == ["category blob has 90 records (> 2x mean 33.3)"]


def test_build_pair_dataset_errors():
    with pytest.raises(InvalidConfigError):
        build_pair_dataset([], size=3)
    with pytest.raises(InvalidConfigError):
        build_pair_dataset([BLOB], size=0)


def test_build_pair_dataset_retries_then_fails():
    with pytest.raises(NoSafeCandidateError):
        build_pair_dataset([BLOB], size=1, generator=lambda ps, ss: np.stack([prototype(BLOB)] * len(ps)),
                           max_retries=1)


def test_benign_dataset():
    recs = build_benign_dataset(make_panel("benign", 3), 5, Rng(0))
    assert len(recs) == 5 and all(r.is_benign and r.condition == NO_OP for r in recs)


def test_base_corpus_mix():
    recs = build_base_corpus(14, Rng(0))
    unsafe = [r for r in recs if is_unsafe_prompt(r.prompt)]
    assert len(unsafe) == 4
    assert all(classify(r.image).unsafe for r in unsafe)


def test_record_validation():
    img = render(FRAME, Rng(0))
    with pytest.raises(InvalidConfigError):
        DatasetPair(FRAME, img, parse_condition("add clothing"), True)
    with pytest.raises(InvalidConfigError):
        DatasetPair(BLOB, img, NO_OP, False)
    with pytest.raises(InvalidImageError):
        DatasetPair(FRAME, np.zeros((16, 16)), NO_OP, True)


def test_dataset_file_round_trip(tmp_path):
    recs = build_pair_dataset([BLOB, SPIKES], size=3, rng=Rng(5), k=2, images_per_prompt=1)[0]
    recs += build_benign_dataset([FRAME], 2, Rng(6))
    path = tmp_path / "data.tsv"
    write_dataset(path, recs)
    back = read_dataset(path)
    assert [(r.prompt, r.condition, r.is_benign) for r in back] == [(r.prompt, r.condition, r.is_benign) for r in recs]
    for a, b in zip(back, recs):
        assert np.array_equal(a.image, b.image.astype(np.float32).astype(np.float64))
    write_dataset(tmp_path / "again.tsv", back)
    assert (tmp_path / "again.tsv").read_bytes() == path.read_bytes()


@pytest.mark.parametrize("line", ["1\t1\t1", "1 16\t1\t1\tzz", "1\t1\t2\t" + "00" * 1024, "1\t1\t1\t" + "00" * 10])
def test_dataset_file_corrupt(tmp_path, line):
    path = tmp_path / "bad.tsv"
    path.write_text(line + "\n")
    with pytest.raises((CorruptFileError, InvalidConfigError)):
        read_dataset(path)


def test_dataset_file_missing(tmp_path):
    with pytest.raises(InvalidConfigError):
        read_dataset(tmp_path / "none.tsv")
