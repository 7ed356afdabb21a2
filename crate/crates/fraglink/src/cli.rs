//! Command-line interface (placeholder during bring-up).
pub fn cli_main(_args: &[String]) -> u8 {
    2
}
