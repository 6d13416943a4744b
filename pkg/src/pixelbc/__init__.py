"""Behavior cloning from pixels on a deterministic toy game.

Subpackages: actions (action space + token codec), env (GatherWorld),
masking (structured attention), policy (masked transformer + sampling),
idm (inverse dynamics + imputation), data (episode files, resize,
augmentation), training (BC loop + label-fraction ablation), runtime
(tick loop, online eval), server (interactive websocket session).
"""

__version__ = "0.1.0"
