//! Thin HTTP client for the verbs that talk to a running server.

use anyhow::{anyhow, Context, Result};
use serde_json::Value;

fn block_on<F: std::future::Future>(f: F) -> F::Output {
    tokio::runtime::Builder::new_current_thread().enable_all().build().expect("tokio runtime").block_on(f)
}

async fn decode(resp: reqwest::Response) -> Result<Value> {
    let status = resp.status();
    let body: Value = resp.json().await.context("server sent a non-JSON reply")?;
    if status.is_success() {
        Ok(body)
    } else {
        Err(anyhow!("{} ({status})", body["error"].as_str().unwrap_or("request failed")))
    }
}

pub fn get(base: &str, path: &str, query: &[(&str, String)]) -> Result<Value> {
    block_on(async {
        let resp = reqwest::Client::new()
            .get(format!("{}{path}", base.trim_end_matches('/')))
            .query(query)
            .send()
            .await
            .with_context(|| format!("cannot reach {base}"))?;
        decode(resp).await
    })
}

pub fn post(base: &str, path: &str, body: &Value) -> Result<Value> {
    block_on(async {
        let resp = reqwest::Client::new()
            .post(format!("{}{path}", base.trim_end_matches('/')))
            .json(body)
            .send()
            .await
            .with_context(|| format!("cannot reach {base}"))?;
        decode(resp).await
    })
}
