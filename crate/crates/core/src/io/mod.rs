//! File formats: JSON-lines datasets and results, binary checkpoints and
//! map sets, PGM images and SVG overlays.

mod binary;
mod image;
mod records;

pub use self::image::{read_pgm, render_svg, write_pgm};
pub use binary::{
    decode_checkpoint, decode_mapset, encode_checkpoint, encode_mapset, load_checkpoint,
    load_mapset, save_checkpoint, save_mapset, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, MAPSET_MAGIC,
    MAPSET_VERSION,
};
pub use records::{
    format_dataset, format_results, load_dataset, parse_dataset, parse_results, save_dataset,
    Dataset, DatasetEntry, DatasetRecord, ResultItem, ResultRecord, WordRecord,
};
