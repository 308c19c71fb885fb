//! Minimal HTTP/1.1 plumbing over arbitrary byte streams (TLS, VSOCK, TCP).

use std::convert::Infallible;
use std::io;
use std::sync::Arc;

use bytes::Bytes;
use http::{Request, Response, StatusCode};
use http_body_util::{BodyExt, Full, Limited};
use hyper::body::Incoming;
use hyper_util::rt::TokioIo;

use crate::transport::AsyncStream;

/// Largest request or response body accepted.
pub const MAX_BODY: usize = 4 * 1024 * 1024;

pub type Dispatch = Arc<dyn Fn(Request<Bytes>) -> Response<Bytes> + Send + Sync>;

fn io_err(e: impl std::fmt::Display) -> io::Error {
    io::Error::other(e.to_string())
}

pub(crate) fn text(status: StatusCode, body: &str) -> Response<Bytes> {
    Response::builder()
        .status(status)
        .header(http::header::CONTENT_TYPE, "text/plain")
        .body(Bytes::copy_from_slice(body.as_bytes()))
        .expect("static response parts are valid")
}

async fn collect(body: Incoming) -> Result<Bytes, Box<dyn std::error::Error + Send + Sync>> {
    Ok(Limited::new(body, MAX_BODY).collect().await?.to_bytes())
}

/// Serves HTTP/1.1 with keep-alive on one connection until the peer hangs up.
pub async fn serve_connection<S: AsyncStream>(stream: S, dispatch: Dispatch) -> io::Result<()> {
    let service = hyper::service::service_fn(move |req: Request<Incoming>| {
        let dispatch = dispatch.clone();
        async move {
            let (parts, body) = req.into_parts();
            let resp = match collect(body).await {
                Ok(b) => dispatch(Request::from_parts(parts, b)),
                Err(_) => text(StatusCode::PAYLOAD_TOO_LARGE, "body too large"),
            };
            Ok::<_, Infallible>(resp.map(Full::new))
        }
    });
    hyper::server::conn::http1::Builder::new()
        .keep_alive(true)
        .serve_connection(TokioIo::new(stream), service)
        .await
        .map_err(io_err)
}

/// A single client connection, reusable for sequential requests.
pub struct HttpClient {
    sender: hyper::client::conn::http1::SendRequest<Full<Bytes>>,
}

impl HttpClient {
    pub async fn handshake<S: AsyncStream>(stream: S) -> io::Result<Self> {
        let (sender, conn) = hyper::client::conn::http1::handshake(TokioIo::new(stream))
            .await
            .map_err(io_err)?;
        tokio::spawn(async move {
            if let Err(e) = conn.await {
                tracing::debug!(error = %e, "http client connection ended");
            }
        });
        Ok(Self { sender })
    }

    pub async fn send(&mut self, req: Request<Bytes>) -> io::Result<Response<Bytes>> {
        self.sender.ready().await.map_err(io_err)?;
        let resp = self
            .sender
            .send_request(req.map(Full::new))
            .await
            .map_err(io_err)?;
        let (parts, body) = resp.into_parts();
        let body = collect(body).await.map_err(io_err)?;
        Ok(Response::from_parts(parts, body))
    }

    pub async fn get(&mut self, path_and_query: &str) -> io::Result<Response<Bytes>> {
        let req = Request::get(path_and_query)
            .header(http::header::HOST, "enclave")
            .body(Bytes::new())
            .map_err(io_err)?;
        self.send(req).await
    }

    pub async fn post(
        &mut self,
        path: &str,
        content_type: &str,
        body: Bytes,
    ) -> io::Result<Response<Bytes>> {
        let req = Request::post(path)
            .header(http::header::HOST, "enclave")
            .header(http::header::CONTENT_TYPE, content_type)
            .body(body)
            .map_err(io_err)?;
        self.send(req).await
    }
}
