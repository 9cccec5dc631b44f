from .callbacks import after_stage, before_stage

__all__ = ['before_stage', 'after_stage']
