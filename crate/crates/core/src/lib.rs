pub mod corpus;
pub mod ctc;
pub mod dfsmn;
pub mod metrics;
pub mod speller;
pub mod wfst;
