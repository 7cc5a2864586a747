//! Where candidate images come from: a local directory (tests, bundled
//! fixtures) or the Wikimedia Commons API.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use regex::Regex;
use serde::Deserialize;

use super::Topic;

#[derive(Debug, thiserror::Error)]
pub enum SourceError {
    #[error("http: {0}")]
    Http(String),
    #[error("malformed listing: {0}")]
    Malformed(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// One file as listed by the source, in listing order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ListingEntry {
    pub url: String,
    pub description: String,
}

pub trait ImageSource: Send + Sync {
    fn list(&self, topic: &Topic) -> Result<Vec<ListingEntry>, SourceError>;
    fn fetch(&self, url: &str) -> Result<Vec<u8>, SourceError>;
}

/// Reads `<root>/<topic_id>/`.
///
/// If `listing.json` exists it gives the order: `[{"file": .., "description": ..}]`.
/// Otherwise every non-`.txt` file is listed by name with its caption taken
/// from a same-stem `.txt` file when present.
#[derive(Debug)]
pub struct LocalDirSource {
    root: PathBuf,
    fetches: AtomicUsize,
}

#[derive(Deserialize)]
struct LocalListingEntry {
    file: String,
    #[serde(default)]
    description: String,
}

const LOCAL_SCHEME: &str = "local:";

impl LocalDirSource {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            fetches: AtomicUsize::new(0),
        }
    }

    /// Number of file reads served so far.
    pub fn fetch_count(&self) -> usize {
        self.fetches.load(Ordering::SeqCst)
    }
}

impl ImageSource for LocalDirSource {
    fn list(&self, topic: &Topic) -> Result<Vec<ListingEntry>, SourceError> {
        let dir = self.root.join(&topic.topic_id);
        let url = |file: &str| format!("{LOCAL_SCHEME}{}/{file}", topic.topic_id);
        let listing = dir.join("listing.json");
        if listing.exists() {
            let entries: Vec<LocalListingEntry> = serde_json::from_slice(&fs::read(&listing)?)
                .map_err(|e| SourceError::Malformed(e.to_string()))?;
            return Ok(entries
                .into_iter()
                .map(|e| ListingEntry {
                    url: url(&e.file),
                    description: e.description,
                })
                .collect());
        }
        if !dir.is_dir() {
            return Ok(Vec::new());
        }
        let mut names: Vec<String> = fs::read_dir(&dir)?
            .filter_map(|e| e.ok())
            .filter(|e| e.file_type().map(|t| t.is_file()).unwrap_or(false))
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| !n.ends_with(".txt") && !n.starts_with('.'))
            .collect();
        names.sort();
        Ok(names
            .into_iter()
            .map(|name| {
                let stem = name.rsplit_once('.').map(|(s, _)| s).unwrap_or(&name);
                let description = fs::read_to_string(dir.join(format!("{stem}.txt"))).unwrap_or_default();
                ListingEntry {
                    url: url(&name),
                    description,
                }
            })
            .collect())
    }

    fn fetch(&self, url: &str) -> Result<Vec<u8>, SourceError> {
        let rel = url
            .strip_prefix(LOCAL_SCHEME)
            .ok_or_else(|| SourceError::Malformed(format!("not a local url: {url}")))?;
        if rel.split('/').any(|part| part == "..") {
            return Err(SourceError::Malformed(format!("path escapes root: {url}")));
        }
        self.fetches.fetch_add(1, Ordering::SeqCst);
        Ok(fs::read(self.root.join(rel))?)
    }
}

/// Wikimedia Commons `api.php` client listing the files of a category.
///
/// The category defaults to `Category:<article title>` derived from the
/// topic's `wiki_url`; `categories` overrides it per topic.
pub struct CommonsSource {
    pub endpoint: String,
    pub user_agent: String,
    pub categories: BTreeMap<String, String>,
    pub page_size: usize,
    agent: ureq::Agent,
}

impl CommonsSource {
    pub fn new(endpoint: impl Into<String>, user_agent: impl Into<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(60)))
            .build()
            .into();
        Self {
            endpoint: endpoint.into(),
            user_agent: user_agent.into(),
            categories: BTreeMap::new(),
            page_size: 50,
            agent,
        }
    }

    pub fn category_for(&self, topic: &Topic) -> String {
        if let Some(c) = self.categories.get(&topic.topic_id) {
            return c.clone();
        }
        let title = topic
            .wiki_url
            .trim_end_matches('/')
            .rsplit('/')
            .next()
            .unwrap_or(&topic.topic_id);
        let title = percent_encoding::percent_decode_str(title)
            .decode_utf8_lossy()
            .replace('_', " ");
        format!("Category:{title}")
    }

    fn get_json(&self, params: &[(&str, &str)]) -> Result<serde_json::Value, SourceError> {
        let mut req = self
            .agent
            .get(&self.endpoint)
            .header("User-Agent", &self.user_agent);
        for (k, v) in params {
            req = req.query(*k, *v);
        }
        let mut resp = req.call().map_err(|e| SourceError::Http(e.to_string()))?;
        resp.body_mut()
            .read_json()
            .map_err(|e| SourceError::Malformed(e.to_string()))
    }
}

/// Parses one `formatversion=2` query page into listing entries plus the
/// continuation token, if any.
pub(crate) fn parse_commons_page(
    body: &serde_json::Value,
) -> Result<(Vec<ListingEntry>, Option<String>), SourceError> {
    let tags = Regex::new(r"<[^>]*>").expect("static regex");
    let mut pages: Vec<&serde_json::Value> = match body.pointer("/query/pages") {
        Some(serde_json::Value::Array(p)) => p.iter().collect(),
        Some(serde_json::Value::Object(m)) => m.values().collect(),
        None => Vec::new(),
        Some(_) => return Err(SourceError::Malformed("query.pages has unexpected type".into())),
    };
    // generator results carry their category position in `index`
    pages.sort_by_key(|p| p.get("index").and_then(|i| i.as_i64()).unwrap_or(i64::MAX));
    let mut out = Vec::new();
    for page in pages {
        let Some(info) = page.pointer("/imageinfo/0") else {
            continue;
        };
        let Some(url) = info.get("url").and_then(|u| u.as_str()) else {
            continue;
        };
        let raw = info
            .pointer("/extmetadata/ImageDescription/value")
            .and_then(|v| v.as_str())
            .unwrap_or("");
        let text = tags.replace_all(raw, "");
        let description = text
            .replace("&amp;", "&")
            .replace("&lt;", "<")
            .replace("&gt;", ">")
            .replace("&quot;", "\"")
            .replace("&#39;", "'")
            .split_whitespace()
            .collect::<Vec<_>>()
            .join(" ");
        out.push(ListingEntry {
            url: url.to_string(),
            description,
        });
    }
    let cont = body
        .pointer("/continue/gcmcontinue")
        .and_then(|c| c.as_str())
        .map(str::to_string);
    Ok((out, cont))
}

impl ImageSource for CommonsSource {
    fn list(&self, topic: &Topic) -> Result<Vec<ListingEntry>, SourceError> {
        let category = self.category_for(topic);
        let limit = self.page_size.to_string();
        let mut out = Vec::new();
        let mut cont: Option<String> = None;
        loop {
            let mut params = vec![
                ("action", "query"),
                ("format", "json"),
                ("formatversion", "2"),
                ("generator", "categorymembers"),
                ("gcmtitle", category.as_str()),
                ("gcmtype", "file"),
                ("gcmlimit", limit.as_str()),
                ("prop", "imageinfo"),
                ("iiprop", "url|size|mime|extmetadata"),
            ];
            if let Some(c) = cont.as_deref() {
                params.push(("gcmcontinue", c));
            }
            let body = self.get_json(&params)?;
            let (entries, next) = parse_commons_page(&body)?;
            out.extend(entries);
            match next {
                Some(n) => cont = Some(n),
                None => break,
            }
        }
        Ok(out)
    }

    fn fetch(&self, url: &str) -> Result<Vec<u8>, SourceError> {
        let mut resp = self
            .agent
            .get(url)
            .header("User-Agent", &self.user_agent)
            .call()
            .map_err(|e| SourceError::Http(e.to_string()))?;
        resp.body_mut()
            .with_config()
            .limit(64 * 1024 * 1024)
            .read_to_vec()
            .map_err(|e| SourceError::Http(e.to_string()))
    }
}
