"""Template OCR, text-rendering metrics, Elo / Likert aggregation and the evaluation suite."""
from .elo import (INITIAL_RATING, K_FACTOR, elo_ratings, elo_update, expected_score, likert_aggregate, read_log,
                  standings)
from .metrics import levenshtein, matched_chars, text_accuracy, text_hit_rate
from .ocr import REJECT, OcrResult, foreground, ocr_match
from .suite import (AVAILABILITY_THRESHOLD, Report, SuiteItem, SuiteRow, build_suite, image_grid, metrics_csv,
                    model_sampler, oracle_sampler, read_suite, run_suite, write_report, write_suite)
