//! Topic names and filters.

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum TopicError {
    #[error("invalid topic filter")]
    InvalidFilter,
    #[error("invalid topic name")]
    InvalidTopic,
}

/// A publish topic: nonempty, wildcard-free.
pub fn validate_topic(topic: &str) -> Result<(), TopicError> {
    if topic.is_empty() || topic.len() > u16::MAX as usize || topic.contains(['+', '#', '\0']) {
        return Err(TopicError::InvalidTopic);
    }
    Ok(())
}

/// A subscription filter: `+` and `#` must occupy whole levels and `#` may
/// only appear last.
pub fn validate_filter(filter: &str) -> Result<(), TopicError> {
    if filter.is_empty() || filter.len() > u16::MAX as usize || filter.contains('\0') {
        return Err(TopicError::InvalidFilter);
    }
    let mut levels = filter.split('/').peekable();
    while let Some(level) = levels.next() {
        let last = levels.peek().is_none();
        match level {
            "#" if !last => return Err(TopicError::InvalidFilter),
            "#" | "+" => {}
            l if l.contains(['+', '#']) => return Err(TopicError::InvalidFilter),
            _ => {}
        }
    }
    Ok(())
}

/// Does `topic` match `filter`? `+` matches exactly one level; a trailing
/// `#` matches the remaining levels, including none (so `a/#` matches `a`).
pub fn topic_matches(filter: &str, topic: &str) -> Result<bool, TopicError> {
    validate_filter(filter)?;
    validate_topic(topic)?;
    Ok(matches_unchecked(filter, topic))
}

/// [`topic_matches`] without validation, for filters already accepted at
/// subscribe time.
pub fn matches_unchecked(filter: &str, topic: &str) -> bool {
    let mut topic_levels = topic.split('/');
    for f in filter.split('/') {
        if f == "#" {
            return true;
        }
        match topic_levels.next() {
            Some(t) if f == "+" || f == t => {}
            _ => return false,
        }
    }
    topic_levels.next().is_none()
}
