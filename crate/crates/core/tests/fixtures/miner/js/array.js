/**
 * Sum all numbers in an array.
 * @param {number[]} xs
 */
function sum(xs) {
  return xs.reduce((a, b) => a + b, 0);
}

/** Return the largest element of xs. */
function max(xs) {
  let best = -Infinity;
  for (const x of xs) {
    if (x > best) { best = x; }
  }
  return best;
}

/* A plain block comment does not count. */
function min(xs) {
  return Math.min(...xs);
}

/**
 * Split xs into chunks of length n.
 */
function chunk(xs, n) {
  const out = [];
  for (let i = 0; i < xs.length; i += n) {
    out.push(xs.slice(i, i + n));
  }
  return out;
}
