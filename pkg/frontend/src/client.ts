/*
 * Browser script for the build manager shell page.
 *
 * Two jobs, nothing more:
 *  - keep the content iframe sized to its document, and
 *  - poll the server with HEAD requests, reloading the frame when the
 *    content checksum (ETag) changes.
 *
 * The inner pages work without this script; it only removes the need to
 * reload and scroll by hand. Plain script, no modules, no dependencies.
 */

interface ClientConfig {
  /** Milliseconds between HEAD polls; clamped to >= 500. */
  pollIntervalMs: number;
  /** Element id of the content iframe. */
  targetFrame: string;
}

interface PollerDeps {
  /** Resolve the checksum header for a URL, or null on any failure. */
  fetchHead(url: string): Promise<string | null>;
  /** Reload the frame, preserving its current URL. */
  reload(frame: HTMLIFrameElement): void;
}

interface Poller {
  tick(): Promise<void>;
  start(): number;
  readonly reloads: number;
}

const DEFAULT_CONFIG: ClientConfig = { pollIntervalMs: 3000, targetFrame: 'content' };
const MIN_POLL_INTERVAL_MS = 500;

function frameDocument(frame: HTMLIFrameElement): Document | null {
  // cross-origin frames throw on access; treat them as untouchable
  try {
    return frame.contentDocument;
  } catch {
    return null;
  }
}

/** Match the frame's height to its content; no-op for cross-origin content. */
function resizeFrame(frame: HTMLIFrameElement): void {
  const doc = frameDocument(frame);
  if (!doc || !doc.documentElement) {
    return;
  }
  const height = Math.max(
    doc.documentElement.scrollHeight,
    doc.body ? doc.body.scrollHeight : 0,
  );
  frame.style.height = `${height}px`;
}

/** Re-apply the resize on every load and on content mutations. */
function installAutoResize(frame: HTMLIFrameElement): void {
  const apply = () => {
    resizeFrame(frame);
    const doc = frameDocument(frame);
    if (doc && typeof MutationObserver !== 'undefined') {
      const observer = new MutationObserver(() => resizeFrame(frame));
      observer.observe(doc.documentElement, {
        subtree: true,
        childList: true,
        characterData: true,
      });
    }
  };
  frame.addEventListener('load', apply);
  apply();
}

async function headChecksum(url: string): Promise<string | null> {
  try {
    const response = await fetch(url, { method: 'HEAD', cache: 'no-store' });
    if (!response.ok) {
      return null;
    }
    return response.headers.get('ETag');
  } catch {
    return null;
  }
}

function reloadInPlace(frame: HTMLIFrameElement): void {
  // location.reload keeps the frame's current URL, so deep links into
  // overview or build pages survive the refresh
  frame.contentWindow?.location.reload();
}

/**
 * Periodic change detection: one in-flight HEAD at most, paused while a
 * form submission is being processed, a failed poll keeps the last seen
 * checksum (so a blip never forces a reload).
 */
function createPoller(
  frame: HTMLIFrameElement,
  config: ClientConfig,
  deps: PollerDeps = { fetchHead: headChecksum, reload: reloadInPlace },
): Poller {
  const interval = Math.max(config.pollIntervalMs, MIN_POLL_INTERVAL_MS);
  let lastChecksum: string | null = null;
  let inFlight = false;
  let formPending = false;
  let reloads = 0;

  const hookForms = () => {
    formPending = false;
    const doc = frameDocument(frame);
    doc?.addEventListener('submit', () => {
      formPending = true;
    });
  };
  frame.addEventListener('load', hookForms);
  hookForms();

  const currentUrl = (): string | null => {
    try {
      return frame.contentWindow ? frame.contentWindow.location.href : null;
    } catch {
      return null;
    }
  };

  const tick = async (): Promise<void> => {
    if (inFlight || formPending) {
      return;
    }
    const url = currentUrl();
    if (!url) {
      return;
    }
    inFlight = true;
    try {
      const checksum = await deps.fetchHead(url);
      if (checksum === null) {
        return; // network blip: keep the last checksum
      }
      if (lastChecksum !== null && checksum !== lastChecksum) {
        reloads += 1;
        deps.reload(frame);
      }
      lastChecksum = checksum;
    } finally {
      inFlight = false;
    }
  };

  return {
    tick,
    start: () => window.setInterval(tick, interval),
    get reloads() {
      return reloads;
    },
  };
}

/** Wire up the frame named in the config, if the page has one. */
function initClient(config: ClientConfig = DEFAULT_CONFIG): Poller | null {
  const element = document.getElementById(config.targetFrame);
  if (!element || element.tagName.toLowerCase() !== 'iframe') {
    return null;
  }
  const frame = element as HTMLIFrameElement;
  installAutoResize(frame);
  const poller = createPoller(frame, config);
  poller.start();
  return poller;
}

const buildManagerClient = {
  DEFAULT_CONFIG,
  MIN_POLL_INTERVAL_MS,
  resizeFrame,
  installAutoResize,
  createPoller,
  initClient,
};

(globalThis as { buildManagerClient?: typeof buildManagerClient }).buildManagerClient =
  buildManagerClient;

if (typeof document !== 'undefined' && document.currentScript) {
  if (document.readyState === 'loading') {
    document.addEventListener('DOMContentLoaded', () => initClient());
  } else {
    initClient();
  }
}
