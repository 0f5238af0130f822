"""Android APK to multi-feature fused RGB images.

DEX bytecode, the decoded manifest and the invoked-API list are each laid out
as a byteplot, enhanced (Canny, histogram equalization, adaptive threshold),
resized with Lanczos-3 and stacked into the R, G and B channels.
"""

from .apk import ApkArtifacts, ZipEntryMeta, extract_artifacts, extract_entry, list_entries
from .axml import decode_axml, manifest_text_bytes
from .byteplot import DEFAULT_WIDTH_TABLE, WidthTable, bytes_to_gray
from .dex import parse_dex, scan_invokes, serialize_api_text
from .enhance import EnhanceConfig, adaptive_threshold, canny, equalize_hist
from .fusion import FuseConfig, encode_png, lanczos_resize, merge_rgb
from .pipeline import PipelineConfig, fuse_apk, run_pipeline

__version__ = "0.1.0"
