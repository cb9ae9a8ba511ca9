//! Blocking HTTP client behind the CLI verbs.

use anyhow::{bail, Context};
use reqwest::blocking::{Client as Http, RequestBuilder};
use serde_json::{json, Value};

pub const URL_ENV: &str = "COMPOSITOR_URL";
pub const DEFAULT_URL: &str = "http://127.0.0.1:8080";

pub struct Client {
    base: String,
    http: Http,
}

impl Client {
    pub fn new(base: impl Into<String>) -> Self {
        Self {
            base: base.into().trim_end_matches('/').to_string(),
            http: Http::new(),
        }
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    fn send(&self, req: RequestBuilder) -> anyhow::Result<Value> {
        let resp = req.send().with_context(|| format!("cannot reach {}", self.base))?;
        let status = resp.status();
        let body: Value = resp.json().unwrap_or(Value::Null);
        if !status.is_success() {
            let msg = body["error"].as_str().map(str::to_string).unwrap_or_else(|| body.to_string());
            bail!("{status}: {msg}");
        }
        Ok(body)
    }

    fn get(&self, path: &str) -> anyhow::Result<Value> {
        self.send(self.http.get(self.url(path)))
    }

    fn post(&self, path: &str, body: Value) -> anyhow::Result<Value> {
        self.send(self.http.post(self.url(path)).json(&body))
    }

    pub fn ingest(&self, title: &str, content: &str, visibility: Option<&str>) -> anyhow::Result<Value> {
        let mut body = json!({ "title": title, "content": content });
        if let Some(v) = visibility {
            body["visibility"] = json!(v);
        }
        self.post("/documents", body)
    }

    pub fn start(&self, body: Value) -> anyhow::Result<Value> {
        self.post("/projects", body)
    }

    pub fn status(&self, id: Option<&str>) -> anyhow::Result<Value> {
        match id {
            Some(id) => self.get(&format!("/projects/{id}")),
            None => self.get("/projects"),
        }
    }

    pub fn events(&self, id: &str) -> anyhow::Result<Value> {
        self.get(&format!("/projects/{id}/events"))
    }

    pub fn abort(&self, id: &str, reason: &str) -> anyhow::Result<Value> {
        self.post(&format!("/projects/{id}/abort"), json!({ "reason": reason }))
    }

    pub fn promote(&self, doc: &str, to: &str) -> anyhow::Result<Value> {
        self.post(&format!("/documents/{doc}/promote"), json!({ "to": to }))
    }

    pub fn clarifications(&self, open_only: bool) -> anyhow::Result<Value> {
        self.get(if open_only { "/clarifications?state=open" } else { "/clarifications" })
    }

    pub fn answer(&self, ticket: &str, answer: &str) -> anyhow::Result<Value> {
        self.post(&format!("/clarifications/{ticket}/answer"), json!({ "answer": answer }))
    }

    pub fn metrics(&self) -> anyhow::Result<Value> {
        self.get("/metrics")
    }
}
