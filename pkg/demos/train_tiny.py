"""Train a small Squeeze-UNet on synthetic phantoms and print the energy summary."""
import sys
import tempfile

from greenseg.config import RunConfig
from greenseg.models import ArchSpec, Family
from greenseg.training import train


def main(out_dir):
    cfg = RunConfig()
    cfg.model = ArchSpec(Family.SQUEEZE_UNET, base_channels=8, depth=3)
    cfg.data.n, cfg.data.side = 128, 32
    cfg.training.max_epochs = 8
    cfg.energy.mode = "modeled"
    cfg.output.dir, cfg.output.run_name = out_dir, "demo"
    log = train(cfg, progress=lambda rec: print(f"epoch {rec['epoch']:2d}  val dice {rec['val_dice']:.3f}  "
                                               f"lr {rec['lr']:.1e}  {rec['epoch_kj']:.3f} kJ"))
    s = log.summary
    print(f"test dice {s['test_dice']:.3f}, {s['energy']['total_kj']:.2f} kJ, "
          f"{s['efficiency']['dice_per_kj']:.3f} Dice/kJ, stop: {s['stop_reason']}")
    print("run log:", log.path)


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="greenseg-"))
