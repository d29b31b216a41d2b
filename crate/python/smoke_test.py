"""Quick end-to-end check of the seqlabel extension module."""

import math
import tempfile
from pathlib import Path

import seqlabel


def main():
    ds = seqlabel.Dataset.synthetic("separable", seed=1, num_docs=120)
    assert len(ds) == 120
    assert ds.num_labels(1) == 8
    train, dev, test = ds.split_sizes()
    assert train + dev + test == 120

    tokens, l1, _ = ds.document(0)
    assert ds.encode(ds.decode(tokens)) == tokens
    assert l1 and all(0 <= i < 8 for i in l1)

    model = seqlabel.Model(ds, "encoder_head", level_number=1, dropout=0.0)
    history = model.fit(ds, learning_rate=3e-3, max_epochs=6)
    assert history and all(math.isfinite(loss) for _, loss, _, _ in history)
    micro, macro = model.evaluate(ds)
    print(f"encoder_head: {len(history)} epochs, test micro-F1 {micro:.3f}, macro-F1 {macro:.3f}")
    assert micro > 0.5

    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "model.bin"
        model.save(path)
        again = seqlabel.Model.load(path, ds)
        assert again.predict(tokens) == model.predict(tokens)

    lwan = seqlabel.Model(ds, '{"kind": "lwan", "heads": 4}', level_number=1)
    assert lwan.num_parameters() > 0

    assert seqlabel.f1_scores([[0, 1]], [[0, 2]], 3) == (0.5, 1 / 3)
    p = seqlabel.fisher_exact(8, 2, 1, 5)
    assert abs(p - 0.034965034965034975) < 1e-12, p

    try:
        seqlabel.Model(ds, "no_such_method")
    except ValueError as e:
        print(f"bad method rejected: {e}")
    else:
        raise AssertionError("bad method accepted")
    print("smoke test passed")


if __name__ == "__main__":
    main()
