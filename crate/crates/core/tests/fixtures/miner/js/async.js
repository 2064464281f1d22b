/**
 * Wait for ms milliseconds.
 */
async function sleep(ms) {
  return new Promise((resolve) => setTimeout(resolve, ms));
}

class Queue {
  /**
   * Methods are not top-level functions.
   */
  push(x) {
    this.items.push(x);
  }
}

/**
 * Retry fn up to n times before giving up.
 * @returns {Promise<*>}
 */
async function retry(fn, n) {
  for (let i = 0; i < n; i++) {
    try {
      return await fn();
    } catch (e) {
      if (i === n - 1) throw e;
    }
  }
}
