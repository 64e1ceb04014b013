//! Token/prompt files, manifests, fold splits and synthetic data.

pub mod folds;
pub mod format;
pub mod manifest;
pub mod synth;

pub use folds::{fold_sizes, make_folds, make_stratified_folds, FoldSplit, FoldStrategy};
pub use format::{
    encode_token_file, read_prompt_file, read_prompt_file_expect, read_prompt_file_raw, read_token_file,
    read_token_header, write_prompt_file, write_token_file, TokenHeader, FORMAT_VERSION, PROMPT_MAGIC,
    TOKEN_MAGIC,
};
pub use manifest::{Dataset, Manifest, ManifestRecord};
pub use synth::{generate_synthetic, SynthConfig, SynthOutput, SynthRecipe};
