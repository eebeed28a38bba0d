"""Model-agnostic machinery for multimodal ReAct agents: the tag protocol,
tool integrations, episode orchestration, trajectory curation, plan
supervision, random-walk query generation, and an efficiency harness.
"""

__version__ = "0.1.0"
