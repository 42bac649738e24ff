"""Layout <-> grid-image cycle training on a synthetic world.

A tiny decoder-only transformer learns two tasks in one token stream:
generating a grid image from a layout, and grounding referring expressions
back to boxes.  Training proceeds in three stages (shared-sequence
pre-training, joint optimisation through a differentiable generation loop,
and policy optimisation with cycle rewards).
"""

__version__ = "0.1.0"
