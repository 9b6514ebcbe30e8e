"""Path-walking agents for knowledge-graph query answering.

Labels from a bounded path search pretrain a recurrent policy by
supervised learning; REINFORCE then fine-tunes it, and beam search
ranks answers for evaluation.
"""

__version__ = "0.1.0"
