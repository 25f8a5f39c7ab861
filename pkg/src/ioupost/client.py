"""Thin HTTP client for the service.

Without a base URL the client mounts the application in-process through an
ASGI transport, so the CLI works with no running server; with ``--server``
the same requests go over the network.
"""

from __future__ import annotations

from typing import Optional

import httpx

from .errors import IouPostError


class _InProcessTransport(httpx.BaseTransport):
    """Sync bridge to the ASGI app; each request runs in a fresh event loop."""

    def __init__(self, app):
        self._inner = httpx.ASGITransport(app=app)

    def handle_request(self, request: httpx.Request) -> httpx.Response:
        import asyncio

        body = request.read()

        async def go() -> httpx.Response:
            async_request = httpx.Request(request.method, request.url,
                                          headers=request.headers, content=body)
            response = await self._inner.handle_async_request(async_request)
            await response.aread()
            return httpx.Response(response.status_code, headers=response.headers,
                                  content=response.content)

        return asyncio.run(go())


class ServiceClient:
    def __init__(self, base_url: Optional[str] = None, timeout: float = 600.0):
        if base_url is None:
            from .service.app import app

            self._client = httpx.Client(
                transport=_InProcessTransport(app),
                base_url="http://ioupost.local",
                timeout=timeout,
            )
        else:
            self._client = httpx.Client(base_url=base_url, timeout=timeout)

    def close(self) -> None:
        self._client.close()

    def __enter__(self) -> "ServiceClient":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def _post(self, path: str, payload: dict) -> dict:
        response = self._client.post(path, json=payload)
        if response.status_code != 200:
            try:
                detail = response.json().get("detail", response.text)
            except ValueError:
                detail = response.text
            raise IouPostError(f"service error on {path} ({response.status_code}): {detail}")
        return response.json()

    def health(self) -> dict:
        response = self._client.get("/health")
        response.raise_for_status()
        return response.json()

    def synth(self, payload: dict) -> dict:
        return self._post("/synth", payload)

    def nms(self, payload: dict) -> dict:
        return self._post("/nms", payload)

    def refine(self, payload: dict) -> dict:
        return self._post("/refine", payload)

    def train(self, payload: dict) -> dict:
        return self._post("/train", payload)

    def evaluate(self, payload: dict) -> dict:
        return self._post("/eval", payload)

    def gradcheck(self, payload: dict) -> dict:
        return self._post("/gradcheck", payload)

    def repro(self, payload: dict) -> dict:
        return self._post("/repro", payload)
