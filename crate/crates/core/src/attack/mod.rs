//! The membership inference attacks.

pub mod spectral;
pub mod supervised;
pub mod unsupervised;

pub use spectral::{spectral_cluster, spectral_cluster_affinity, Clustering};
pub use supervised::{
    predict_batch, predict_membership, train_on_vectors, train_supervised_attack, AttackModel, AttackNetSpec,
    AttackTrainConfig, MembershipPrediction,
};
pub use unsupervised::{attack_unsupervised, UnsupervisedOutcome};
