"""Smoke test for the chunkfuzz extension module."""

import chunkfuzz


def main():
    assert "steering" in chunkfuzz.list_targets()
    t = chunkfuzz.Target("steering")
    assert t.name == "steering"
    assert len(t.blocks()) > 10

    verdict, bbs = t.execute(b"steer,200\n")
    assert verdict == "ok", verdict
    assert t.symbol("do_steer") in bbs

    trace = t.trace(b"hello,1\n")
    assert "MMIO" in trace
    assert "group" in t.groups(b"hello,1\n")

    witnesses = t.explore(b"hello,1\n")
    texts = {bytes(v or 0 for v in w[3]) for w in witnesses}
    assert any(x.startswith(b"steer") for x in texts), texts

    models = chunkfuzz.Models()
    models.add_text("ctx0_mmio_40000818:\n  0: undef\n  1: [0x4f,0x4b,0x0d,0x0a]\n")
    assert models.labels() == ["ctx0_mmio_40000818"]
    assert models.select("ctx0_mmio_40000818", 5) == 1
    verdict, bbs = chunkfuzz.Target("doorlock").execute(b"\x01", models)

    f = chunkfuzz.Fuzzer(t, seed=1, window=20000)
    f.run(100000)
    assert f.execs == 100000
    assert t.symbol("do_motor") in f.coverage()
    assert f.models().entry_total() >= 2
    assert f.log_csv().startswith("timestamp,execs,bb_count,models_deployed")
    print("ok", f.runs())


if __name__ == "__main__":
    main()
