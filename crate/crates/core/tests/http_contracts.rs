//! Wire-level checks of the HTTP clients against a scripted local server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;

use base64::Engine as _;
use qzlora_core::corpus::{Category, CommonsSource, ImageSource, Topic};
use qzlora_core::generate::{BackendError, HttpImageBackend, ImageBackend, ImageRequest};
use qzlora_core::provider::{
    HttpTextProvider, HttpVisionProvider, ProviderError, TextCompletionProvider, TextRequest, VisionProvider,
    VisionRequest,
};
use serde_json::{json, Value};

#[derive(Debug, Clone)]
struct Seen {
    request_line: String,
    headers: Vec<(String, String)>,
    body: Vec<u8>,
}

impl Seen {
    fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }

    fn json(&self) -> Value {
        serde_json::from_slice(&self.body).unwrap()
    }
}

/// Serves the scripted `(status, content_type, body)` replies in order, one
/// per connection, and records what it received.
fn serve(replies: Vec<(u16, &'static str, Vec<u8>)>) -> (String, Arc<Mutex<Vec<Seen>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    thread::spawn(move || {
        for (status, ctype, body) in replies {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut request_line = String::new();
            reader.read_line(&mut request_line).unwrap();
            let mut headers = Vec::new();
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                let (k, v) = line.split_once(':').unwrap();
                headers.push((k.trim().to_string(), v.trim().to_string()));
            }
            let len = headers
                .iter()
                .find(|(k, _)| k.eq_ignore_ascii_case("content-length"))
                .map(|(_, v)| v.parse::<usize>().unwrap())
                .unwrap_or(0);
            let mut req_body = vec![0; len];
            reader.read_exact(&mut req_body).unwrap();
            log.lock().unwrap().push(Seen {
                request_line: request_line.trim_end().to_string(),
                headers,
                body: req_body,
            });
            let mut out = stream;
            write!(
                out,
                "HTTP/1.1 {status} X\r\nContent-Type: {ctype}\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
                body.len()
            )
            .unwrap();
            out.write_all(&body).unwrap();
            out.flush().unwrap();
        }
    });
    (base, seen)
}

fn json_reply(status: u16, v: Value) -> (u16, &'static str, Vec<u8>) {
    (status, "application/json", serde_json::to_vec(&v).unwrap())
}

fn chat_reply(text: &str) -> (u16, &'static str, Vec<u8>) {
    json_reply(
        200,
        json!({"choices": [{"message": {"role": "assistant", "content": text}}],
               "usage": {"prompt_tokens": 11, "completion_tokens": 3}}),
    )
}

fn gujia() -> Topic {
    Topic {
        topic_id: "gujia".into(),
        wiki_url: "https://en.wikipedia.org/wiki/Gujia".into(),
        summary_sentence: "Gujhia is a sweet deep-fried pastry.".into(),
        category: Category::FoodAndDrink,
        monthly_views: 3000,
        distractor_ids: vec![],
    }
}

#[test]
fn commons_listing_follows_continuation() {
    let page = |urls: &[(&str, i64)], cont: Option<&str>| {
        let pages: Vec<Value> = urls
            .iter()
            .map(|(u, i)| json!({"index": i, "imageinfo": [{"url": u,
                "extmetadata": {"ImageDescription": {"value": format!("<i>{u}</i>")}}}]}))
            .collect();
        let mut body = json!({"query": {"pages": pages}});
        if let Some(c) = cont {
            body["continue"] = json!({"gcmcontinue": c, "continue": "gcmcontinue||"});
        }
        json_reply(200, body)
    };
    let (base, seen) = serve(vec![
        page(&[("https://u/2.jpg", 2), ("https://u/1.jpg", 1)], Some("file|next")),
        page(&[("https://u/3.jpg", 3)], None),
    ]);
    let source = CommonsSource::new(format!("{base}/w/api.php"), "qzlora-test/0.1");
    let entries = source.list(&gujia()).unwrap();
    let urls: Vec<&str> = entries.iter().map(|e| e.url.as_str()).collect();
    assert_eq!(urls, ["https://u/1.jpg", "https://u/2.jpg", "https://u/3.jpg"]);
    assert_eq!(entries[0].description, "https://u/1.jpg");

    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 2);
    assert!(seen[0].request_line.starts_with("GET /w/api.php?"));
    assert!(seen[0].request_line.contains("gcmtitle=Category%3AGujia"));
    assert!(seen[0].request_line.contains("generator=categorymembers"));
    assert!(!seen[0].request_line.contains("gcmcontinue"));
    assert!(seen[1].request_line.contains("gcmcontinue=file%7Cnext"));
    assert_eq!(seen[0].header("user-agent"), Some("qzlora-test/0.1"));
}

#[test]
fn commons_fetch_returns_bytes() {
    let (base, _) = serve(vec![(200, "image/png", vec![1, 2, 3, 4])]);
    let source = CommonsSource::new(format!("{base}/api"), "ua");
    assert_eq!(source.fetch(&format!("{base}/img.png")).unwrap(), vec![1, 2, 3, 4]);
}

#[test]
fn text_provider_sends_chat_completion() {
    let (base, seen) = serve(vec![chat_reply("Question 1: ...")]);
    let provider = HttpTextProvider::new(format!("{base}/v1/chat/completions"), Some("sk-test".into()));
    let resp = provider
        .complete(&TextRequest {
            model_id: "gpt-4o".into(),
            system_text: "sys".into(),
            user_text: "write a quiz".into(),
            max_tokens: 512,
            temperature: 0.0,
        })
        .unwrap();
    assert_eq!(resp.text, "Question 1: ...");
    assert_eq!(resp.token_usage.prompt_tokens, 11);
    let seen = seen.lock().unwrap();
    assert!(seen[0].request_line.starts_with("POST /v1/chat/completions"));
    assert_eq!(seen[0].header("authorization"), Some("Bearer sk-test"));
    let body = seen[0].json();
    assert_eq!(body["model"], "gpt-4o");
    assert_eq!(body["messages"][0]["role"], "system");
    assert_eq!(body["messages"][1]["content"], "write a quiz");
    assert_eq!(body["max_tokens"], 512);
}

#[test]
fn vision_provider_attaches_data_url() {
    let (base, seen) = serve(vec![chat_reply("Answer: C")]);
    let provider = HttpVisionProvider::new(format!("{base}/chat"), Some("k".into()));
    let resp = provider
        .ask(&VisionRequest {
            model_id: "vlm".into(),
            system_text: "look".into(),
            user_text: "Which?\nA) x\nB) y".into(),
            image_bytes: vec![0xff, 0xd8, 0xff],
            media_type: "image/jpeg".into(),
        })
        .unwrap();
    assert_eq!(resp.text, "Answer: C");
    let body = seen.lock().unwrap()[0].json();
    let content = &body["messages"][1]["content"];
    assert_eq!(content[0]["text"], "Which?\nA) x\nB) y");
    assert_eq!(content[1]["image_url"]["url"], "data:image/jpeg;base64,/9j/");
}

#[test]
fn chat_errors_surface() {
    let (base, _) = serve(vec![
        json_reply(500, json!({"error": "boom"})),
        json_reply(200, json!({"choices": []})),
    ]);
    let provider = HttpTextProvider::new(format!("{base}/c"), None);
    let req = TextRequest {
        model_id: "m".into(),
        system_text: String::new(),
        user_text: "u".into(),
        max_tokens: 1,
        temperature: 0.0,
    };
    assert!(matches!(provider.complete(&req), Err(ProviderError::Http(_))));
    assert!(matches!(provider.complete(&req), Err(ProviderError::Malformed(_))));
}

fn image_request(lora: Option<&str>) -> ImageRequest {
    ImageRequest {
        positive: "Generate the image of a pastry.".into(),
        negative: "cartoon".into(),
        seed: 42,
        steps: 30,
        cfg: 7.0,
        width: 512,
        height: 512,
        lora_tag: lora.map(str::to_string),
        lora_weight: lora.map(|_| 1.0),
    }
}

#[test]
fn image_backend_contract() {
    let png = vec![0x89, b'P', b'N', b'G', 1, 2, 3];
    let encoded = base64::engine::general_purpose::STANDARD.encode(&png);
    let (base, seen) = serve(vec![
        json_reply(200, json!({"image_base64": encoded, "metadata": {"sampler": "euler"}})),
        json_reply(200, json!({"image_base64": "AAAA"})),
        (400, "text/plain", b"negative prompt too long".to_vec()),
        (503, "text/plain", b"busy".to_vec()),
        json_reply(200, json!({"image_base64": "@@not base64@@"})),
    ]);
    let backend = HttpImageBackend::new(format!("{base}/generate"), "sd-1.5");
    assert_eq!(backend.model_tag(), "sd-1.5");

    let ok = backend.generate(&image_request(None)).unwrap();
    assert_eq!(ok.image_bytes, png);
    assert_eq!(ok.metadata["sampler"], "euler");
    let with_lora = backend.generate(&image_request(Some("models/gujia/qzlora-top-15.safetensors"))).unwrap();
    assert_eq!(with_lora.image_bytes, vec![0, 0, 0]);

    match backend.generate(&image_request(None)) {
        Err(BackendError::BadRequest(msg)) => assert_eq!(msg, "negative prompt too long"),
        other => panic!("expected BadRequest, got {other:?}"),
    }
    assert!(matches!(backend.generate(&image_request(None)), Err(BackendError::Unavailable(_))));
    assert!(matches!(backend.generate(&image_request(None)), Err(BackendError::Malformed(_))));

    let seen = seen.lock().unwrap();
    assert!(seen[0].request_line.starts_with("POST /generate"));
    let plain = seen[0].json();
    assert_eq!(
        plain,
        json!({"positive": "Generate the image of a pastry.", "negative": "cartoon", "seed": 42,
               "steps": 30, "cfg": 7.0, "width": 512, "height": 512})
    );
    let lora = seen[1].json();
    assert_eq!(lora["lora_tag"], "models/gujia/qzlora-top-15.safetensors");
    assert_eq!(lora["lora_weight"], 1.0);
}

#[test]
fn image_backend_unreachable() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let backend = HttpImageBackend::new(format!("http://127.0.0.1:{port}/generate"), "x");
    assert!(matches!(backend.generate(&image_request(None)), Err(BackendError::Unavailable(_))));
}
