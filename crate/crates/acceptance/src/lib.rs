//! Holds the `acceptance` test target; run it with
//! `cargo test -p g3dhf-acceptance --test acceptance`.
