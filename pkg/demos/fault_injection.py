# %% [markdown]
# # Fault injection
#
# Replay is transactional: each attempt starts with the recorded soft reset,
# and DMA memory from a failed attempt is released.  A transient fault costs
# a retry; a persistent one ends in DIVERGED with the event that failed.

# %%
from driverlet.recorder import campaign
from driverlet.replayer import Replayer, replay_blk_rw, verify_package
from driverlet.simdev import FaultKind, FaultPlan, MockBlk

KEY = b"demo-key"
runs = [("blk_rw", {"rw": 0, "blkid": 0, "blkcnt": n}) for n in (1, 8)]
package = verify_package(campaign(runs, seed=7, key=KEY).templates, KEY)

# %%
plan = FaultPlan(FaultKind.TRANSIENT_BAD_STATUS, probability=0.2, rng_seed=1)
rp = Replayer(package, MockBlk(0, plan))
rp.boot()
attempts = [replay_blk_rw(rp, 0, 8 * k, 8).attempts for k in range(200)]
print("jobs:", len(attempts), "retried:", sum(a > 1 for a in attempts), "max attempts:", max(attempts))

# %%
rp = Replayer(package, MockBlk(0, FaultPlan(FaultKind.PERSISTENT_MEDIUM_REMOVED)))
rp.boot()
out = replay_blk_rw(rp, 0, 0, 8)
print(out.render())
for h in out.history:
    print("  ", h.template, h.format())
