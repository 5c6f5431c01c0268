"""Parameter counts of the four architectures for both presets (shapes only, nothing allocated)."""

from xsynth.nets import ArchConfig, param_count, param_shapes

REFERENCE = {"unet": 15e6, "adm": 35e6, "uvit": 125e6, "dit": 558e6}

if __name__ == "__main__":
    print(f"{'arch':6} {'lite':>10} {'full':>12} {'reference':>10} {'ratio':>6}")
    for arch, ref in REFERENCE.items():
        lite = param_count(param_shapes(ArchConfig.lite(arch)))
        full = param_count(param_shapes(ArchConfig.paper(arch)))
        print(f"{arch:6} {lite:10,d} {full:12,d} {ref / 1e6:9.0f}M {full / ref:6.3f}")
