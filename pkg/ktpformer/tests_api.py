"""
JSON API over the experiment registry.
"""

from django.test import Client, TestCase

from .models import ExperimentRun, MetricRecord


class RegistryTestCase(TestCase):

    @classmethod
    def setUpTestData(cls):
        cls.completed = ExperimentRun.objects.create(
            name='desk smd', mode='SMD', config_text='frames = 27\n', status='completed',
            parameter_count=12345, flop_count=67890, steps=40, final_loss=12.5,
        )
        cls.failed = ExperimentRun.objects.create(
            name='desk umd', mode='UMD', config_text='frames = 27\n', status='failed', error_message='nan loss',
        )
        for index in range(25):
            ExperimentRun.objects.create(name=f'sweep {index}', mode='BASELINE', config_text='', status='completed')
        MetricRecord.objects.create(run=cls.completed, clip_name='all', metric='mpjpe', value=41.5)
        MetricRecord.objects.create(run=cls.completed, clip_name='walk_a', metric='mpjpe', value=40.0)

    def setUp(self):
        self.client = Client()


class RunListAPITests(RegistryTestCase):

    def test_default_page(self):
        response = self.client.get('/api/runs/')
        self.assertEqual(response.status_code, 200)
        data = response.json()
        self.assertEqual(len(data['results']), 20)
        self.assertEqual(data['pagination']['total_count'], 27)
        self.assertEqual(data['pagination']['total_pages'], 2)
        self.assertTrue(data['pagination']['has_next'])

    def test_second_page(self):
        data = self.client.get('/api/runs/', {'page': 2}).json()
        self.assertEqual(len(data['results']), 7)
        self.assertFalse(data['pagination']['has_next'])

    def test_filters(self):
        data = self.client.get('/api/runs/', {'status': 'failed'}).json()
        self.assertEqual([run['name'] for run in data['results']], ['desk umd'])
        self.assertEqual(data['filters_applied'], {'status': 'failed'})
        data = self.client.get('/api/runs/', {'mode': 'SMD', 'status': 'completed'}).json()
        self.assertEqual([run['id'] for run in data['results']], [self.completed.id])

    def test_per_page_is_clamped(self):
        data = self.client.get('/api/runs/', {'per_page': 1000}).json()
        self.assertEqual(data['pagination']['per_page'], 100)
        self.assertEqual(len(data['results']), 27)

    def test_invalid_per_page(self):
        response = self.client.get('/api/runs/', {'per_page': 'many'})
        self.assertEqual(response.status_code, 400)
        self.assertIn('error', response.json())

    def test_post_not_allowed(self):
        self.assertEqual(self.client.post('/api/runs/').status_code, 405)


class RunDetailAPITests(RegistryTestCase):

    def test_detail_includes_metrics(self):
        data = self.client.get(f'/api/runs/{self.completed.id}/').json()
        self.assertEqual(data['parameter_count'], 12345)
        self.assertEqual(data['final_loss'], 12.5)
        self.assertEqual(data['config_text'], 'frames = 27\n')
        self.assertEqual(data['metrics'], [
            {'clip_name': 'all', 'metric': 'mpjpe', 'value': 41.5},
            {'clip_name': 'walk_a', 'metric': 'mpjpe', 'value': 40.0},
        ])

    def test_failed_run_reports_error(self):
        data = self.client.get(f'/api/runs/{self.failed.id}/').json()
        self.assertEqual((data['status'], data['error_message']), ('failed', 'nan loss'))
        self.assertEqual(data['metrics'], [])

    def test_unknown_run(self):
        self.assertEqual(self.client.get('/api/runs/99999/').status_code, 404)
