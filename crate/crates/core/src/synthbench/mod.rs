mod dataset;
mod eval;

pub use dataset::{
    category_name, generate_dataset, load_dataset, rle_decode, rle_encode, save_dataset, GeneratorConfig, Instance,
    Split, SyntheticVideo,
};
pub use eval::{
    average_precision, evaluate, export_embeddings, forgetting_ratio, iou_thresholds, query_correlation, st_iou,
    EvalReport, ForgettingLedger, ForgettingResult, FrIndicator, Prediction,
};
