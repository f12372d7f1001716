pub mod backend;
pub mod corpus;
pub mod hashing;
pub mod metrics;
pub mod prompting;
pub mod selfexplain;
