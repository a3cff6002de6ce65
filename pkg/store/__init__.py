from .base import Base
from .archive import Archive, export_archive, load_archive
from .checkpoint import load_checkpoint, load_model, save_checkpoint, save_model
from .metrics import MetricsLog
from .report import Reports, Summary
