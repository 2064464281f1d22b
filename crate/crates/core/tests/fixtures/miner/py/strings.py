"""String helpers."""


def reverse(s):
    """Return the characters of s in reverse order."""
    return s[::-1]


def shout(s):
    return s.upper() + "!"


def is_palindrome(s):
    """Check whether s reads the same backwards."""
    cleaned = "".join(c for c in s.lower() if c.isalnum())
    return cleaned == reverse(cleaned)


def count_vowels(s):
    """Count the vowels in s.

    Only ASCII vowels are considered.
    """
    return sum(1 for c in s.lower() if c in "aeiou")


def _strip(s):
    # internal helper, no docstring
    return s.strip()
