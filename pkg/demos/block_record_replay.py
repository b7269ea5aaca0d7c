# %% [markdown]
# # Recording and replaying a block device
#
# The gold driver for the simulated SD-style controller runs once per
# interesting input.  Each run is traced, its branches on inputs are probed,
# and the result is a straight-line template the replayer can run without
# the driver.

# %%
import random

from driverlet.recorder import campaign, record_template
from driverlet.replayer import Replayer, replay_blk_rw, verify_package
from driverlet.simdev import MockBlk
from driverlet.template import serialize

KEY = b"demo-key"

# %% [markdown]
# One recording first.  Six blocks go through programmed I/O, so the
# template has no DMA allocations, and the exploration explains why: forcing
# blkcnt to 9 made the driver allocate DMA memory instead.

# %%
t, run, evidence = record_template("blk_rw", {"rw": 0, "blkid": 0, "blkcnt": 6}, seed=1)
print(serialize(t).decode().splitlines()[0])
for e in evidence[:3]:
    print(e.format())

# %% [markdown]
# A campaign covers reads and writes of 1 to 256 blocks.  Same-path runs merge
# and everything is signed.

# %%
runs = [("blk_rw", {"rw": rw, "blkid": 0, "blkcnt": n}) for rw in (0, 1) for n in (1, 8, 32, 128, 256)]
result = campaign(runs, seed=7, key=KEY)
print(result.coverage)

# %% [markdown]
# Replay: write a pattern, read it back.

# %%
rp = Replayer(verify_package(result.templates, KEY), MockBlk(seed=3))
print("boot:", rp.boot().render())

data = random.Random(0).randbytes(32 * 512)
print("write:", replay_blk_rw(rp, 1, 64, 32, data).render())
back = replay_blk_rw(rp, 0, 64, 32)
print("read:", back.render(), "match" if back.data == data else "MISMATCH")

# %% [markdown]
# Outside the recorded coverage nothing touches the device.

# %%
before = rp.dev.access_count
print(replay_blk_rw(rp, 0, 64, 9).render())
print("register accesses:", rp.dev.access_count - before)
