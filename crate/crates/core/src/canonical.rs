//! Canonical JSON: sorted object keys, no insignificant whitespace,
//! base-10 integers. Binary fields are carried as lowercase hex strings by
//! the types that serialize them.

use serde::Serialize;

/// Serializes `value` in canonical form. Struct fields are re-sorted by
/// routing through [`serde_json::Value`], whose maps are ordered.
pub fn to_string<T: Serialize + ?Sized>(value: &T) -> serde_json::Result<String> {
    let v = serde_json::to_value(value)?;
    serde_json::to_string(&v)
}

pub fn to_vec<T: Serialize + ?Sized>(value: &T) -> serde_json::Result<Vec<u8>> {
    to_string(value).map(String::into_bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Serialize)]
    struct S {
        zeta: u64,
        alpha: &'static str,
        nested: N,
    }

    #[derive(Serialize)]
    struct N {
        b: i32,
        a: bool,
    }

    #[test]
    fn sorted_and_compact() {
        let s = S { zeta: 18_446_744_073_709_551_615, alpha: "x", nested: N { b: -1, a: true } };
        assert_eq!(to_string(&s).unwrap(), r#"{"alpha":"x","nested":{"a":true,"b":-1},"zeta":18446744073709551615}"#);
    }
}
