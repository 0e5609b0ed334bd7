"""Sequential training driver for the three primitive skills."""

from skillspace.skills import train_primitive

for skill, updates in (("loco", 22000), ("body", 16000), ("hand", 12000)):
    print(f"=== {skill}: {updates} updates ===", flush=True)
    train_primitive(skill, f"/root/pkg/runs/{skill}", updates=updates,
                    n_envs=32, seed=0)
