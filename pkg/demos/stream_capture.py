# %% [markdown]
# # A camera-like stream device
#
# The stream device answers each frame request with the image size, and the
# driver allocates a buffer of exactly that size.  The template keeps the size
# as a symbol bound from the device's reply.

# %%
from driverlet.recorder import campaign
from driverlet.replayer import Replayer, replay_stream_capture, verify_package
from driverlet.simdev import MockStream, frame_size

KEY = b"demo-key"
runs = [("stream_capture", {"resolution": r, "frames": f}) for f in (1, 10) for r in (0, 1, 2)]
result = campaign(runs, seed=7, key=KEY)
print(result.coverage)

# %%
rp = Replayer(verify_package(result.templates, KEY), MockStream(seed=5))
rp.boot()
out = replay_stream_capture(rp, 2, 10)
print(out.render(), out.template)
print("allocations:", out.allocations[1:])
print("frame table:", [frame_size(2, i, 5) for i in range(10)])
