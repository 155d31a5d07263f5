use std::collections::HashSet;
use std::sync::Mutex;

static SEEN: Mutex<Option<HashSet<String>>> = Mutex::new(None);

/// Log `msg` at warn level the first time it occurs in this process.
/// Shape-dependent warnings would otherwise repeat on every forward pass.
pub(crate) fn warn_once(msg: String) {
    let mut seen = SEEN.lock().unwrap_or_else(|e| e.into_inner());
    if seen.get_or_insert_with(HashSet::new).insert(msg.clone()) {
        log::warn!("{msg}");
    }
}
