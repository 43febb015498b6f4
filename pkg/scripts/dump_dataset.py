"""Write the synthetic re-ID dataset of a config to disk (images.f32 + manifest)."""

import argparse

from dcformer.config import RunConfig, apply_overrides, load_config
from dcformer.data import dump_dataset, generate


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("out")
    ap.add_argument("--config")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    args = ap.parse_args()
    cfg = load_config(args.config) if args.config else RunConfig()
    cfg = apply_overrides(cfg, dict(s.split("=", 1) for s in args.set))
    ds = generate(cfg.data, cfg.data_seed)
    path = dump_dataset(ds, args.out, cfg.data)
    print(f"{len(ds.ids)} images -> {path}")


if __name__ == "__main__":
    main()
