pub mod autodiff;
pub mod corpus;
pub mod decoder;
pub mod eval;
pub mod flow;
pub mod ngram;
pub mod oracle;
pub mod personalize;
pub mod pipeline;
pub mod service;
