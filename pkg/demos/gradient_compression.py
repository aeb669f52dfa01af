"""Bytes on the wire for one data-parallel step under each gradient compressor."""
from greenseg.data import generate_phantoms
from greenseg.data.types import stack_batch
from greenseg.models import ArchSpec, Family, build_model
from greenseg.optim import make_optimizer
from greenseg.parallel import RankGroup, ddp_train_step, shard_batch

model = build_model(ArchSpec(Family.ATTN_SQUEEZE_UNET, 8, 4), seed=0)
x, y = stack_batch(generate_phantoms(16, 32, seed=0))
for name in ("none", "int8", "powersgd1", "powersgd4"):
    group = RankGroup(model, 4, lambda p: make_optimizer("adam", p, lr=1e-3), loss="bce")
    m = ddp_train_step(group, shard_batch(x, y, 4), name)
    group.close()
    print(f"{name:10s} raw {m.bytes_raw:>9,d} B  sent {m.bytes_sent:>9,d} B  "
          f"ratio {m.bytes_sent / m.bytes_raw:.3f}  loss {m.loss:.4f}")
