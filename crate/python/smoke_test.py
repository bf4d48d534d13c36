"""Smoke test for the syngrid Python extension.

Build and install the module first, e.g.

    pip install maturin
    maturin develop --release -m crates/python/Cargo.toml

then run `python python/smoke_test.py`.
"""

import json

import syngrid


def main():
    parsed = syngrid.parse_command("walk to the red circle")
    assert parsed["tokens"] == ["walk", "to", "the", "red", "circle"]
    assert parsed["heads"] == [-1, 0, 4, 4, 0], parsed
    assert parsed["labels"][0] == "root"

    mask = syngrid.attention_mask("push the box")
    assert mask == [[1, 0, 1], [0, 1, 1], [1, 1, 1]], mask
    print(syngrid.constituency_tree("push the box that is inside of the big box"))

    try:
        syngrid.parse_command("walk the")
    except ValueError as err:
        print("malformed command rejected:", err)
    else:
        raise AssertionError("malformed command accepted")

    episodes = syngrid.generate_corpus(seed=7, size=20)
    assert len(episodes) == 20
    for ep in episodes:
        end = ep.world.run(ep.actions)
        assert end.agent()[:2] == ep.referent, (ep, end.agent())
        assert ep.world.oracle(ep.command) == ep.actions
        assert len(ep.world.encode()) == 6 and len(ep.world.encode()[0][0]) == 17

    train, test, val = syngrid.build_split("c1", seed=1, train_size=30, test_size=10, val_size=5)
    assert all(" and " not in ep.command for ep in train)
    assert all(" and " in ep.command for ep in test + val)

    config = {"d_model": 16, "d_hidden": 32, "n_heads": 2, "n_encoder_layers": 6, "n_decoder_layers": 1}
    shared = syngrid.Model(json.dumps(config), seed=0)
    unshared = syngrid.Model(json.dumps({**config, "share_encoder_weights": False}), seed=0)
    assert shared.count_params() < unshared.count_params()
    prediction = shared.predict(episodes[0])
    assert all(isinstance(a, str) for a in prediction)
    assert syngrid.exact_match(episodes[0].actions, episodes[0].actions)

    print("python smoke test passed")


if __name__ == "__main__":
    main()
