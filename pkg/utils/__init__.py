from utils.console import console, setup_logging
from utils.file_processor import FileProcessor
