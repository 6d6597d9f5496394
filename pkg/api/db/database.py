"""Engine and session wiring for the results service, configured through HydraSettings."""

from collections.abc import AsyncGenerator
from typing import Any

from sqlalchemy.ext.asyncio import AsyncEngine, AsyncSession, async_sessionmaker, create_async_engine
from sqlalchemy.orm import DeclarativeBase

from hydrasim.config import HydraSettings


class Base(DeclarativeBase):
    pass


def build_engine(settings: HydraSettings, **options: Any) -> AsyncEngine:
    if settings.database_url.startswith("sqlite"):
        options.setdefault("connect_args", {"check_same_thread": False})
    return create_async_engine(settings.database_url, echo=settings.database_echo, **options)


def session_factory(bind: AsyncEngine) -> async_sessionmaker[AsyncSession]:
    return async_sessionmaker(bind, class_=AsyncSession, expire_on_commit=False)


engine = build_engine(HydraSettings())
async_session = session_factory(engine)


async def get_db() -> AsyncGenerator[AsyncSession, None]:
    """Request-scoped session for the run and query routes."""
    async with async_session() as session:
        yield session


async def init_db(bind: AsyncEngine | None = None) -> None:
    async with (bind or engine).begin() as conn:
        await conn.run_sync(Base.metadata.create_all)


async def close_db(bind: AsyncEngine | None = None) -> None:
    await (bind or engine).dispose()
