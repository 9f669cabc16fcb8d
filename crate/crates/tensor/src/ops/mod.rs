pub(crate) mod layout;
pub(crate) mod linalg;
pub(crate) mod pointwise;
pub(crate) mod reduce;
