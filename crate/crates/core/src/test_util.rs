use crate::phantom::{generate_case, PhantomCase, PhantomSpec};

pub(crate) fn desk_case(seed: u64) -> PhantomCase {
    generate_case(&PhantomSpec::desk(), seed).unwrap()
}
