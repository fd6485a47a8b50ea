//! Bitext retrieval, the NLI transfer probe and t-SNE projections.

mod clique;
mod dump;
mod nli;
mod retrieval;
mod tsne;

#[cfg(test)]
mod tests;

pub use clique::clique_compactness;
pub use dump::{decode_embd, encode_embd, read_embd, sidecar_path, write_embd, EMBD_MAGIC, EMBD_VERSION};
pub use nli::{
    eval_nli, nli_dataset_features, nli_features, nli_report, train_nli_probe, NliProbe,
    NliProbeConfig, NliReport, NliRow, NLI_CLASSES,
};
pub use retrieval::{
    aggregate_retrieval, embed_eval_set, evaluate_retrieval, nearest_targets, retrieval_accuracy,
    EmbeddingMatrix, LanguageRoles, RetrievalReport, ROW_NORM_TOLERANCE,
};
pub use tsne::{
    fit_bandwidths, joint_affinities, kl_divergence, silhouette, squared_distances, tsne,
    tsne_project, Bandwidth, TsneConfig, TsneLayout, TsnePoint, MAX_SEARCH_STEPS,
    PERPLEXITY_TOLERANCE,
};
