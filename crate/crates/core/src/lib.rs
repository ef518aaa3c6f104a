pub mod error;
pub mod tensor;
pub mod autodiff;
pub mod sxnn;
pub mod gxnn;
pub mod models;
pub mod gpdata;
pub mod train;
