"""Smoke test for the compiled `dlformer` extension.

Build and install first, e.g. from crates/py:

    maturin build --release -o dist && pip install --no-build-isolation dist/dlformer-*.whl
"""

import os
import tempfile

import dlformer


def main():
    assert dlformer.rmse([0.0, 0.0], [3.0, 4.0]) == (12.5) ** 0.5
    assert dlformer.r2([2.0, 2.0], [1.0, 3.0]) is None
    assert dlformer.dtw([0.0, 1.0], [0.0, 1.0]) == 0.0

    with tempfile.TemporaryDirectory() as tmp:
        csv_path = os.path.join(tmp, "lagged.csv")
        table = dlformer.synth("lagged-copy(j=1,tau=2,sigma=0.01)", rows=300, features=2, seed=7, path=csv_path)
        assert os.path.exists(os.path.join(tmp, "lagged.meta.json"))
        reread = dlformer.Table.from_csv(csv_path, "y")
        assert reread.columns == table.columns == ["x1", "y"]

        cfg = dlformer.ModelConfig(2, 4, 1, d_embed=16, heads=2, d_attn=8, encoder_blocks=1, decoder_blocks=1)
        fc = dlformer.train(table, cfg, learning_rate=3e-3, batch_size=32, max_epochs=20, patience=20, seed=1)
        first, last = fc.history[0][1], fc.history[-1][1]
        assert last < first, (first, last)

        report = fc.evaluate(table, "test")
        assert report["scale"] == "original"
        print("test rmse={rmse:.4f} r2={r2} dtw={dtw:.4f}".format(**report))

        ex = fc.explain(table)
        total = sum(sum(row) for row in ex.weights)
        assert abs(total - 1.0) < 1e-9, total
        print("feature importance", ex.feature_importance())
        print("top pairs", ex.top(3))

        ckpt = os.path.join(tmp, "model.ckpt")
        fc.save(ckpt)
        back = dlformer.Forecaster.load(ckpt)
        assert back.config_hash == fc.config_hash
        assert back.forecast(table) == fc.forecast(table)
        print("forecast", back.forecast(table))

    print("ok")


if __name__ == "__main__":
    main()
