//! A small self-contained benchmark: ten function-completion tasks, a mock
//! backend that samples plausible programs for them, and scripted execution
//! outcomes for every program it can produce.
//!
//! Each task offers a correct body, a plausible wrong body, a short wrong
//! body that the Coder prompt alone rates highly, a body that raises, and an
//! occasional bare `pass`.

use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{save_corpus, CorpusError, HiddenTests, Language, PromptStyle, TaskInstance};
use crate::executor::{MockEntry, MockExecConfig, ScriptedOutcome};
use crate::gateway::{MockConfig, MockProgram, MockTask, DEFAULT_TEMPERATURE};

struct Spec {
    name: &'static str,
    args: &'static str,
    instruction: &'static str,
    test: &'static str,
    hidden: &'static [&'static str],
    correct: (&'static str, &'static str),
    wrong: (&'static str, &'static str),
    short: (&'static str, &'static str),
    error: (&'static str, &'static str),
}

const SPECS: &[Spec] = &[
    Spec {
        name: "sum_even",
        args: "numbers",
        instruction: "Return the sum of the even numbers in the list.",
        test: "sum_even([1, 2, 3, 4])",
        hidden: &["sum_even([1, 2, 3, 4]) == 6", "sum_even([]) == 0", "sum_even([5, 7]) == 0"],
        correct: ("    even = [n for n in numbers if n % 2 == 0]\n    return sum(even)\n", "6"),
        wrong: ("    odd = [n for n in numbers if n % 2]\n    return sum(odd)\n", "4"),
        short: ("    return 0\n", "0"),
        error: ("    even = [n for n in numbers if n.is_even()]\n    return sum(even)\n", "AttributeError"),
    },
    Spec {
        name: "count_vowels",
        args: "text",
        instruction: "Count the vowels in the text and return the count.",
        test: "count_vowels(\"Apple\")",
        hidden: &["count_vowels(\"Apple\") == 2", "count_vowels(\"xyz\") == 0"],
        correct: (
            "    vowels = \"aeiou\"\n    count = 0\n    for ch in text.lower():\n        if ch in vowels:\n            count += 1\n    return count\n",
            "2",
        ),
        wrong: (
            "    vowels = \"aeiou\"\n    total = 0\n    for ch in text:\n        if ch in vowels:\n            total = total + 1\n    return total\n",
            "1",
        ),
        short: ("    return len(text)\n", "5"),
        error: ("    vowels = \"aeiou\"\n    return text.count(vowels) + text.vowels\n", "AttributeError"),
    },
    Spec {
        name: "reverse_words",
        args: "sentence",
        instruction: "Reverse the order of the words in the sentence.",
        test: "reverse_words(\"the quick fox\")",
        hidden: &["reverse_words(\"the quick fox\") == \"fox quick the\"", "reverse_words(\"a\") == \"a\""],
        correct: ("    words = sentence.split()\n    return \" \".join(reversed(words))\n", "'fox quick the'"),
        wrong: ("    parts = sentence.split()\n    return \" \".join(sorted(parts))\n", "'fox quick the'"),
        short: ("    return sentence\n", "'the quick fox'"),
        error: ("    words = sentence.split()\n    return \" \".join(words.reverse())\n", "TypeError"),
    },
    Spec {
        name: "max_difference",
        args: "values",
        instruction: "Return the difference between the largest and smallest values.",
        test: "max_difference([3, 9, 4])",
        hidden: &["max_difference([3, 9, 4]) == 6", "max_difference([1]) == 0"],
        correct: ("    largest = max(values)\n    smallest = min(values)\n    return largest - smallest\n", "6"),
        wrong: ("    first = values[0]\n    last = values[-1]\n    return last - first\n", "1"),
        short: ("    return max(values)\n", "9"),
        error: ("    return largest(values) - smallest(values)\n", "NameError"),
    },
    Spec {
        name: "is_palindrome",
        args: "text",
        instruction: "Check whether the text reads the same forwards and backwards.",
        test: "is_palindrome(\"abca\")",
        hidden: &["is_palindrome(\"level\") is True", "is_palindrome(\"abca\") is False"],
        correct: ("    backwards = text[::-1]\n    return text == backwards\n", "False"),
        wrong: ("    head = text[0]\n    tail = text[-1]\n    return head == tail\n", "True"),
        short: ("    return True\n", "True"),
        error: ("    backwards = text.reverse()\n    return text == backwards\n", "AttributeError"),
    },
    Spec {
        name: "multiples",
        args: "n",
        instruction: "Return the numbers from 1 to n that are divisible by 3 or 5.",
        test: "multiples(10)",
        hidden: &["multiples(10) == [3, 5, 6, 9, 10]", "multiples(2) == []"],
        correct: ("    numbers = range(1, n + 1)\n    return [i for i in numbers if i % 3 == 0 or i % 5 == 0]\n", "[3, 5, 6, 9, 10]"),
        wrong: ("    numbers = range(1, n + 1)\n    return [i for i in numbers if i % 3 == 0 and i % 5 == 0]\n", "[]"),
        short: ("    return []\n", "[]"),
        error: ("    numbers = range(1, n + 1)\n    return [i for i in numbers if i.divisible(3, 5)]\n", "AttributeError"),
    },
    Spec {
        name: "average",
        args: "numbers",
        instruction: "Return the average of the numbers, or 0.0 when the list is empty.",
        test: "average([1, 2, 4])",
        hidden: &["abs(average([1, 2, 4]) - 7 / 3) < 1e-9", "average([]) == 0.0"],
        correct: (
            "    if not numbers:\n        return 0.0\n    return sum(numbers) / len(numbers)\n",
            "2.3333333333333335",
        ),
        wrong: ("    if not numbers:\n        return 0.0\n    return sum(numbers) // len(numbers)\n", "2"),
        short: ("    return 0.0\n", "0.0"),
        error: ("    total = sum(numbers)\n    return total / count\n", "NameError"),
    },
    Spec {
        name: "capitalize_words",
        args: "sentence",
        instruction: "Capitalize the first letter of every word in the sentence.",
        test: "capitalize_words(\"hello big world\")",
        hidden: &["capitalize_words(\"hello big world\") == \"Hello Big World\""],
        correct: ("    return \" \".join(word.capitalize() for word in sentence.split())\n", "'Hello Big World'"),
        wrong: ("    return \" \".join(part.upper() for part in sentence.split())\n", "'HELLO BIG WORLD'"),
        short: ("    return sentence\n", "'hello big world'"),
        error: ("    return \" \".join(word.capital() for word in sentence.split())\n", "AttributeError"),
    },
    Spec {
        name: "factorial",
        args: "n",
        instruction: "Return the factorial of n, the product of the integers from 1 to n.",
        test: "factorial(5)",
        hidden: &["factorial(5) == 120", "factorial(0) == 1"],
        correct: ("    product = 1\n    for i in range(1, n + 1):\n        product *= i\n    return product\n", "120"),
        wrong: ("    result = 1\n    for i in range(1, n):\n        result = result * i\n    return result\n", "24"),
        short: ("    return n\n", "5"),
        error: ("    product = 1\n    for i in range(1, n + 1):\n        product *= integers[i]\n    return product\n", "NameError"),
    },
    Spec {
        name: "unique_sorted",
        args: "items",
        instruction: "Return the unique items of the list in sorted order.",
        test: "unique_sorted([3, 1, 3, 2])",
        hidden: &["unique_sorted([3, 1, 3, 2]) == [1, 2, 3]", "unique_sorted([]) == []"],
        correct: ("    unique = set(items)\n    return sorted(unique)\n", "[1, 2, 3]"),
        wrong: ("    values = tuple(items)\n    return sorted(values)\n", "[1, 2, 3, 3]"),
        short: ("    return items\n", "[3, 1, 3, 2]"),
        error: ("    return sorted(items.unique())\n", "AttributeError"),
    },
];

/// Sampling probabilities of each program variant at the default
/// temperature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VariantMix {
    pub correct: f64,
    pub wrong: f64,
    pub short: f64,
    pub error: f64,
    pub trivial: f64,
}

impl Default for VariantMix {
    fn default() -> Self {
        Self {
            correct: 0.45,
            wrong: 0.25,
            short: 0.06,
            error: 0.2,
            trivial: 0.04,
        }
    }
}

/// Everything a dry run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct Fixture {
    pub corpus: Vec<TaskInstance>,
    pub backend: MockConfig,
    pub executor: MockExecConfig,
}

pub const MAX_TASKS: usize = 10;

/// Builds the fixture for the first `tasks` tasks (at most [`MAX_TASKS`]).
pub fn fixture(tasks: usize, mix: &VariantMix) -> Fixture {
    // Weights are stored so that the mock's temperature sharpening at the
    // default temperature yields `mix` back.
    let weight = |p: f64| p.powf(DEFAULT_TEMPERATURE);
    let mut corpus = Vec::new();
    let mut mock_tasks = Vec::new();
    let mut entries = Vec::new();
    for spec in SPECS.iter().take(tasks.min(MAX_TASKS)) {
        let task_id = format!("synth/{}", spec.name);
        let header = format!("def {}({}):\n", spec.name, spec.args);
        corpus.push(TaskInstance {
            task_id: task_id.clone(),
            instruction: spec.instruction.to_string(),
            context: header.clone(),
            demos: vec![],
            language: Language::PythonFunction,
            prompt_style: PromptStyle::FunctionCompletion,
            visible_test: Some(spec.test.to_string()),
            hidden_tests: HiddenTests::new(spec.hidden.iter().map(|s| s.to_string()).collect()),
        });
        let variants = [
            (spec.correct, mix.correct, true, true),
            (spec.wrong, mix.wrong, true, false),
            (spec.short, mix.short, true, false),
            (spec.error, mix.error, false, false),
            (("    pass\n", "None"), mix.trivial, true, false),
        ];
        let mut programs = Vec::new();
        for ((text, result), p, runs, correct) in variants {
            if p > 0.0 {
                programs.push(MockProgram {
                    text: text.to_string(),
                    weight: weight(p),
                });
            }
            entries.push(MockEntry {
                task_id: task_id.clone(),
                index: None,
                text: Some(text.to_string()),
                outcome: if runs {
                    ScriptedOutcome::ok(result, correct)
                } else {
                    ScriptedOutcome::error(result)
                },
            });
        }
        mock_tasks.push(MockTask {
            prompt_contains: header,
            programs,
        });
    }
    Fixture {
        corpus,
        backend: MockConfig {
            name: "synth".into(),
            tasks: mock_tasks,
            ..MockConfig::default()
        },
        executor: MockExecConfig {
            entries,
            // Anything unscripted, such as injected probe programs, fails.
            default: Some(ScriptedOutcome::error("NameError")),
        },
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const BACKEND_FILE: &str = "mock_backend.json";
pub const EXECUTOR_FILE: &str = "mock_exec.json";

impl Fixture {
    /// Writes the corpus, backend script and execution script into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<(), SynthError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        save_corpus(&self.corpus, dir.join(CORPUS_FILE))?;
        let backend = serde_json::to_string_pretty(&self.backend).map_err(io::Error::other)?;
        fs::write(dir.join(BACKEND_FILE), backend)?;
        self.executor.save(dir.join(EXECUTOR_FILE))?;
        Ok(())
    }
}
