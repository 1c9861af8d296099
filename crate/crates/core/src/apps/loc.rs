//! Line counts of the two halo-exchange routines shipped with the crate.

/// Non-blank lines of `source` outside `//` and `/* */` comments.
pub fn count_code_lines(source: &str) -> usize {
    let mut in_block = false;
    let mut count = 0;
    for line in source.lines() {
        let mut code = false;
        let mut rest = line.trim();
        while !rest.is_empty() {
            if in_block {
                match rest.find("*/") {
                    Some(i) => {
                        in_block = false;
                        rest = rest[i + 2..].trim_start();
                    }
                    None => rest = "",
                }
            } else if rest.starts_with("//") {
                rest = "";
            } else if let Some(i) = rest.find("/*") {
                code |= !rest[..i].trim().is_empty();
                in_block = true;
                rest = &rest[i + 2..];
            } else {
                code = true;
                rest = "";
            }
        }
        count += code as usize;
    }
    count
}

/// The body of `fn name` (signature through closing brace), found by
/// brace matching. String literals containing braces are not handled.
pub fn extract_fn<'a>(source: &'a str, name: &str) -> Option<&'a str> {
    let start = source.find(&format!("fn {name}"))?;
    let line_start = source[..start].rfind('\n').map_or(0, |i| i + 1);
    let open = start + source[start..].find('{')?;
    let mut depth = 0usize;
    for (i, ch) in source[open..].char_indices() {
        match ch {
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&source[line_start..open + i + 1]);
                }
            }
            _ => {}
        }
    }
    None
}

/// Code lines of `fn name` in `source`, or 0 if it is absent.
pub fn loc_metric(source: &str, name: &str) -> usize {
    extract_fn(source, name).map_or(0, count_code_lines)
}

pub const ONE_SIDED_SOURCE: &str = include_str!("halo_one_sided.rs");
pub const TWO_SIDED_SOURCE: &str = include_str!("halo_two_sided.rs");

/// `(one-sided, two-sided)` line counts of the halo-exchange routines.
pub fn halo_loc() -> (usize, usize) {
    (
        loc_metric(ONE_SIDED_SOURCE, "exchange_halos"),
        loc_metric(TWO_SIDED_SOURCE, "exchange_halos"),
    )
}
