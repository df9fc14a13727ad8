"""Put the repository root on the import path so tests can import src.*"""

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))
