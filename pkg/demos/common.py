"""Shared setup for the demo scripts: a trained model cached under demos/out/."""

from pathlib import Path

from reoi import io, wm

OUT = Path(__file__).resolve().parent / "out"


def dataset(seed=0, episodes=500):
    return wm.generate_dataset(seed, episodes, "mixed")


def model(data=None):
    """Load the cached model, training it once (about two minutes on one core)."""
    OUT.mkdir(exist_ok=True)
    path = OUT / "model.bin"
    if path.exists():
        return io.load_model(path)
    print("training the world model on 500 episodes ...")
    m = wm.train(data if data is not None else dataset())
    io.save_model(path, m)
    return m
