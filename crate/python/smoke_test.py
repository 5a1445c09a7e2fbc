"""Quick check of the Python bindings. Build first with
`maturin develop --release -m crates/python/Cargo.toml`."""

import math
import tempfile

import pygroundspeech as gs

SMALL = """
[synth]
vocab_size = 6
n_verbs = 1
n_images = 60
distractors = 10

[model]
embed_dim = 16
conv_channels = 6
lstm_hidden = 8
attn_dim = 4

[model.vq]
codebook_sizes = [4, 6]

[train]
epochs = 1
batch_size = 8
"""


def norm(v):
    return math.sqrt(sum(x * x for x in v))


def main():
    corpus = gs.Corpus.synthetic(SMALL, seed=1)
    assert corpus.n_test_images > 10 and corpus.target_words

    plain, vq = gs.train(corpus, SMALL, seed=1, vq=True)
    assert vq is not None and vq.has_vq and not plain.has_vq
    cap = plain.encode_caption(corpus.test_caption(0))
    img = plain.encode_image(corpus.test_image(0))
    assert len(cap) == plain.embed_dim and abs(norm(cap) - 1) < 1e-9 and abs(norm(img) - 1) < 1e-9
    r10 = plain.recall_at(corpus, 10)
    assert 0.0 <= r10 <= 100.0

    with tempfile.TemporaryDirectory() as d:
        vq.save(d)
        again = gs.Model.load(d)
        assert again.encode_caption(corpus.test_caption(1)) == vq.encode_caption(corpus.test_caption(1))

    chi = gs.chi_square_2x2([[3048, 2281], [2940, 2881]])
    assert abs(chi - 49.8) < 1.0, chi

    cb = gs.Codebook([[0.0, 0.0], [1.0, 1.0], [1.0, 1.0]])
    assert len(cb) == 3 and cb.nearest([0.9, 1.2]) == 1

    d = gs.Dictionary.parse("CAT  K AE1 T\nCAP  K AE1 P\nCOT  K AA1 T\nDOG  D AO1 G\n")
    assert d.cohort_size(["K", "AE"]) == 2 and d.density(["K", "AE", "T"]) == 2

    frames = gs.mfcc([math.sin(i * 0.05) for i in range(8000)])
    assert len(frames[0]) == 39

    try:
        gs.Model.load("/nonexistent")
    except OSError:
        pass
    else:
        raise AssertionError("loading a missing model should fail")

    print(f"smoke test ok: R@10 {r10:.1f}%, chi-square {chi:.2f}")


if __name__ == "__main__":
    main()
