pub mod compute;
pub mod encoder;
pub mod masking;
pub mod textpipe;
pub mod losses;
pub mod paired;
pub mod labeler;
pub mod synth;
pub mod decode;
pub mod trainer;
pub mod diagnostics;
pub mod pipeline;
pub mod gradcheck;
