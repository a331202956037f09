"""Training loops: PLM pretraining, base transducer, frozen-base adapter training."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .biasing import BiasingAdapters, BiasingList, PlmEncoder, biased_loss, biased_loss_from_states
from .numerics import Tensor
from .transducer import AudioFeatures, Transducer

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 5e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, clip_norm: float | None = 5.0):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in self.params]
        if self.clip_norm is not None:
            norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
            if norm > self.clip_norm:
                grads = [g * (self.clip_norm / norm) for g in grads]
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class Example:
    frames: np.ndarray
    target: list[int]
    transcript: str


def _check(value: float, step: int) -> None:
    if not math.isfinite(value):
        raise TrainingError(f"non-finite loss at step {step}")


def run_epoch(examples: Sequence[Example], loss_fn: Callable[[Example], Tensor], opt: Adam,
              batch_size: int, rng: np.random.Generator, step0: int = 0) -> tuple[float, int]:
    """One shuffled pass; returns (mean per-utterance loss, steps taken)."""
    order = rng.permutation(len(examples))
    total, steps = 0.0, 0
    for start in range(0, len(order), batch_size):
        batch = order[start:start + batch_size]
        opt.zero_grad()
        for i in batch:
            with nx.Tape() as tape:
                loss = loss_fn(examples[i])
                scaled = nx.scale(loss, 1.0 / len(batch))
            value = loss.item()
            _check(value, step0 + steps)
            total += value
            nx.backward(tape, scaled)
        opt.step()
        steps += 1
    return total / len(examples), steps


def train_base(model: Transducer, examples: Sequence[Example], *, epochs: int, lr: float,
               batch_size: int, rng: np.random.Generator) -> list[float]:
    model.set_trainable(True)
    opt = Adam(model.parameters(), lr=lr)
    history, steps = [], 0
    for epoch in range(epochs):
        loss, n = run_epoch(examples, lambda ex: biased_loss(model, None, ex.frames, ex.target),
                            opt, batch_size, rng, steps)
        steps += n
        history.append(loss)
        log.info("base epoch %d loss %.4f", epoch, loss)
    return history


def train_adapters(model: Transducer, adapters: BiasingAdapters, examples: Sequence[Example],
                   make_list: Callable[[Example, np.random.Generator], BiasingList], *, epochs: int,
                   lr: float, batch_size: int, rng: np.random.Generator,
                   max_steps: int | None = None) -> list[float]:
    """Only adapter parameters train; the transducer and PLM are frozen.

    ``make_list`` builds a fresh biasing list per example from the epoch rng.
    Encoder and prediction states do not depend on the list, so they are
    computed once up front.
    """
    model.set_trainable(False)
    if adapters.plm is not None:
        adapters.plm.set_trainable(False)
    adapters.set_trainable(True)
    states = [(model.encode_audio(AudioFeatures(ex.frames)), model.predict(ex.target)) for ex in examples]
    opt = Adam(adapters.parameters(), lr=lr)
    history, steps = [], 0
    for epoch in range(epochs):
        list_rng = np.random.default_rng([int(rng.integers(2**31)), epoch])
        lists = [make_list(ex, list_rng) for ex in examples]
        index = {id(ex): i for i, ex in enumerate(examples)}

        def loss_fn(ex: Example) -> Tensor:
            i = index[id(ex)]
            enc, pred = states[i]
            return biased_loss_from_states(model, adapters, enc, pred, ex.target, lists[i])

        subset = examples
        if max_steps is not None and steps + math.ceil(len(examples) / batch_size) > max_steps:
            subset = examples[:max(0, (max_steps - steps) * batch_size)]
        if not subset:
            break
        loss, n = run_epoch(subset, loss_fn, opt, batch_size, rng, steps)
        steps += n
        history.append(loss)
        log.info("adapter epoch %d loss %.4f", epoch, loss)
    model.set_trainable(True)
    return history


def lm_perplexity(plm: PlmEncoder, seqs: Sequence[Sequence[int]]) -> float:
    nll, count = 0.0, 0
    for s in seqs:
        if s:
            loss, n = plm.lm_loss(s)
            nll += loss.item()
            count += n
    return math.exp(nll / max(count, 1))


def train_plm(plm: PlmEncoder, train_seqs: Sequence[Sequence[int]], heldout: Sequence[Sequence[int]], *,
              epochs: int, lr: float, batch_size: int, rng: np.random.Generator) -> list[float]:
    """Next-subword training; returns held-out perplexity before training and after each epoch."""
    plm.set_trainable(True)
    seqs = [list(s) for s in train_seqs if s]
    opt = Adam(plm.parameters(), lr=lr)
    history = [lm_perplexity(plm, heldout)]
    log.info("plm epoch -1 ppl %.3f", history[0])
    steps = 0
    for epoch in range(epochs):
        order = rng.permutation(len(seqs))
        for start in range(0, len(order), batch_size):
            batch = order[start:start + batch_size]
            opt.zero_grad()
            n_tok = sum(len(seqs[i]) for i in batch)
            for i in batch:
                with nx.Tape() as tape:
                    loss, _ = plm.lm_loss(seqs[i])
                    scaled = nx.scale(loss, 1.0 / n_tok)
                _check(loss.item(), steps)
                nx.backward(tape, scaled)
            opt.step()
            steps += 1
        history.append(lm_perplexity(plm, heldout))
        log.info("plm epoch %d ppl %.3f", epoch, history[-1])
    return history
